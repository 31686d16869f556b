use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use log::info;
use relex_core::analysis::{
    global_trigger_weights, pos_neg_trigger_compare, render_heatmap_ansi, render_report, write_comparison,
    write_stem_weights, DEFAULT_WINDOW,
};
use relex_core::corpus::{
    make_folds, mask_entities, parse_tsv, synth_dataset, toy_vocabulary, write_tsv, SynthConfig, SYNTH_FILLERS,
    SYNTH_TRIGGERS,
};
use relex_core::metrics::{write_scores, ScoreRow};
use relex_core::model::predict;
use relex_core::record::{read_records, write_records};
use relex_core::tokenizer::load_vocab;
use relex_core::trainer::{evaluate, fine_tune, run_cv, write_trace};
use relex_core::{Checkpoint, LabelSet, Model, Prediction, RelationInstance, Tokenizer};

use crate::config::{env_layer, parse_assignment, read_config_file, RunConfig};
use crate::manifest::{manifest_path_for, RunManifest};

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).map_err(|e| relex_core::Error::io(path, e))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| relex_core::Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| relex_core::Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| relex_core::Error::io(path, e))?;
    Ok(())
}

fn read_instances(path: &Path, labels: &LabelSet) -> Result<Vec<RelationInstance>> {
    parse_tsv(open(path)?, labels).with_context(|| path.display().to_string())
}

/// Settings shared by `train` and `cv`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat key=value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// `base` (BERT-base, lr 2e-5, batch 32, 10 epochs, 128 tokens) or `desk`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// One of cls, lstm_ll, att_ll, lstm_ll_nocls, att_ll_nocls, lstm_cls, att_cls.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub freeze_encoder: bool,
}

impl ConfigArgs {
    fn flag_layer(&self) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        for s in &self.set {
            let (k, v) = parse_assignment(s)?;
            m.insert(k, v);
        }
        let typed = [
            ("preset", self.preset.clone()),
            ("task", self.task.clone()),
            ("head", self.head.clone()),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("max_len", self.max_len.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("freeze_encoder", self.freeze_encoder.then(|| "true".to_string())),
        ];
        for (k, v) in typed {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        }
        Ok(m)
    }

    /// Resolves against the process environment.
    pub fn resolve(&self) -> Result<RunConfig> {
        self.resolve_with_env(std::env::vars())
    }

    pub fn resolve_with_env(&self, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => read_config_file(p)?,
            None => BTreeMap::new(),
        };
        RunConfig::resolve(&[file, env_layer(env)?, self.flag_layer()?])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthVariant {
    /// Trigger between the tags iff positive.
    Plain,
    /// Half of the negatives also contain a trigger, outside the pair.
    Decoy,
    /// Opaque filler tokens for frozen-encoder head comparisons.
    Opaque,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SynthVariant::Plain)]
    pub variant: SynthVariant,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("synth");
    let cfg = match args.variant {
        SynthVariant::Plain => SynthConfig::new(args.n, &SYNTH_FILLERS, &SYNTH_TRIGGERS, args.seed),
        SynthVariant::Decoy => SynthConfig::decoy(args.n, args.seed),
        SynthVariant::Opaque => SynthConfig::opaque_fillers(args.n, args.seed),
    };
    let data = manifest.time("generate", || synth_dataset(&cfg))?;
    let mut w = create(&args.out)?;
    write_tsv(&data, &mut w)?;
    finish(w, &args.out)?;
    manifest.config.insert("n".into(), args.n.to_string());
    manifest
        .config
        .insert("variant".into(), format!("{:?}", args.variant).to_lowercase());
    manifest.seed = Some(args.seed);
    manifest.output("corpus", &args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    /// Raw TSV: id, sentence, label.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// TSV: id, start1, end1, start2, end2 as character offsets, end exclusive.
    #[arg(long)]
    pub spans: PathBuf,
    #[arg(long, default_value = "ppi")]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_spans(path: &Path) -> Result<BTreeMap<String, [usize; 4]>> {
    use std::io::BufRead;
    let mut out = BTreeMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| anyhow!("parse error: {} line {}: {m}", path.display(), i + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(&format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let mut offsets = [0usize; 4];
        for (slot, f) in offsets.iter_mut().zip(&fields[1..]) {
            *slot = f.trim().parse().map_err(|_| bad(&format!("bad offset {f:?}")))?;
        }
        if out.insert(fields[0].to_string(), offsets).is_some() {
            return Err(bad(&format!("duplicate id {:?}", fields[0])));
        }
    }
    Ok(out)
}

pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<RunManifest> {
    use std::io::BufRead;
    let mut manifest = RunManifest::new("preprocess");
    let labels = LabelSet::for_task(&args.task)?;
    let tags = labels.tags();
    let (tag1, tag2) = (tags[0], *tags.last().expect("at least one entity type"));
    let spans = parse_spans(&args.spans)?;
    let mut out = Vec::new();
    for (i, line) in open(&args.input)?.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| anyhow!("{}: {} line {}: {e}", "input error", args.input.display(), i + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(at(&format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let [s1, e1, s2, e2] = *spans
            .get(fields[0])
            .ok_or_else(|| at(&format!("no spans for id {:?}", fields[0])))?;
        let masked = mask_entities(fields[1], s1..e1, s2..e2, tag1, tag2).map_err(|e| at(&e))?;
        out.push(RelationInstance::new(fields[0], masked, fields[2], &labels).map_err(|e| at(&e))?);
    }
    let mut w = create(&args.out)?;
    write_tsv(&out, &mut w)?;
    finish(w, &args.out)?;
    manifest.config.insert("task".into(), labels.task.clone());
    manifest.input("raw", &args.input).input("spans", &args.spans);
    manifest.output("corpus", &args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Vocabulary file, one token per line. Without it a word-level
    /// vocabulary is built from the training sentences.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub settings: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn tokenizer_for(vocab: Option<&Path>, data: &[RelationInstance], lowercase: bool) -> Result<Tokenizer> {
    let vocab = match vocab {
        Some(p) => load_vocab(open(p)?).with_context(|| p.display().to_string())?,
        None => toy_vocabulary(data.iter().map(|i| i.sentence.as_str()), lowercase),
    };
    Ok(Tokenizer::new(vocab).with_lowercase(lowercase))
}

fn initial_model(cfg: &RunConfig, tokenizer: &Tokenizer, labels: &LabelSet, seed: u64) -> Result<Model> {
    let mut enc = cfg.encoder_config(tokenizer.vocab.len())?;
    enc.seed = seed;
    Ok(Model::init(enc, cfg.head_spec(labels.len())?)?)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    cmd_train_with(args, args.settings.resolve()?)
}

/// `cmd_train` with already resolved settings.
pub fn cmd_train_with(args: &TrainArgs, cfg: RunConfig) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("train");
    let labels = cfg.labels()?;
    let train_cfg = cfg.train_config()?;
    let train = read_instances(&args.train, &labels)?;
    let dev = args.dev.as_deref().map(|p| read_instances(p, &labels)).transpose()?;
    let tokenizer = tokenizer_for(args.vocab.as_deref(), &train, cfg.lowercase()?)?;
    let model = initial_model(&cfg, &tokenizer, &labels, train_cfg.seed)?;
    info!(
        "training {} on {} instances, {} parameters",
        model.head_spec.kind.model_label(),
        train.len(),
        model.num_parameters()
    );
    let outcome = manifest.time("train", || fine_tune(model, &tokenizer, &labels, &train, dev.as_deref(), &train_cfg))?;

    let ckpt_path = args.out_dir.join("model.ckpt");
    let trace_path = args.out_dir.join("trace.tsv");
    let ckpt = Checkpoint::new(outcome.model, &tokenizer, labels, Some(train_cfg.clone()));
    let mut w = create(&ckpt_path)?;
    ckpt.save(&mut w)?;
    finish(w, &ckpt_path)?;
    let mut w = create(&trace_path)?;
    write_trace(&outcome.trace, &mut w)?;
    finish(w, &trace_path)?;

    manifest.config = cfg.values.clone();
    manifest
        .config
        .insert("selected_epoch".into(), outcome.selected_epoch.to_string());
    manifest.seed = Some(train_cfg.seed);
    manifest.input("train", &args.train);
    if let Some(d) = &args.dev {
        manifest.input("dev", d);
    }
    if let Some(v) = &args.vocab {
        manifest.input("vocab", v);
    }
    manifest.output("checkpoint", &ckpt_path).output("trace", &trace_path);
    manifest.write(&args.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn write_predictions(preds: &[Prediction], gold: &[RelationInstance], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "id\tgold\tpredicted\tprobs")?;
    for (p, g) in preds.iter().zip(gold) {
        let probs: Vec<String> = p.probs.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}\t{}\t{}\t{}", p.id, g.label, p.label, probs.join(","))?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Output directory for scores, predictions and attention records.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("eval");
    let ckpt = Checkpoint::load(open(&args.checkpoint)?).with_context(|| args.checkpoint.display().to_string())?;
    let tokenizer = ckpt.tokenizer()?;
    let labels = ckpt.meta.labels.clone();
    let test = read_instances(&args.test, &labels)?;
    let preds = manifest.time("predict", || predict(&ckpt.model, &tokenizer, &labels, &test))?;
    let (scores, _) = evaluate(&labels, &test, &preds)?;
    info!("F1 {:.4} on {} instances", scores.f1, test.len());

    let scores_path = args.out.join("scores.tsv");
    let row = ScoreRow {
        model: ckpt.meta.head.kind.model_label().to_string(),
        task: labels.task.clone(),
        scores,
    };
    let mut w = create(&scores_path)?;
    write_scores(&[row], &mut w)?;
    finish(w, &scores_path)?;
    let pred_path = args.out.join("predictions.tsv");
    write_predictions(&preds, &test, &pred_path)?;
    manifest.output("scores", &scores_path).output("predictions", &pred_path);

    let records: Vec<_> = preds.iter().filter_map(|p| p.record.clone()).collect();
    if !records.is_empty() {
        let rec_path = args.out.join("records.tsv");
        let mut w = create(&rec_path)?;
        write_records(&records, &mut w)?;
        finish(w, &rec_path)?;
        manifest.output("records", &rec_path);
    }
    manifest.config.insert("head".into(), ckpt.meta.head.kind.name().into());
    manifest.config.insert("task".into(), labels.task.clone());
    manifest.seed = ckpt.meta.train.as_ref().map(|t| t.seed);
    manifest.input("checkpoint", &args.checkpoint).input("test", &args.test);
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub settings: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_cv(args: &CvArgs) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("cv");
    let cfg = args.settings.resolve()?;
    let labels = cfg.labels()?;
    let train_cfg = cfg.train_config()?;
    let data = read_instances(&args.data, &labels)?;
    let tokenizer = tokenizer_for(args.vocab.as_deref(), &data, cfg.lowercase()?)?;
    let split = make_folds(&data, args.k, train_cfg.seed)?;
    let make = |fold: usize| {
        initial_model(&cfg, &tokenizer, &labels, train_cfg.seed.wrapping_add(fold as u64))
            .map_err(|e| relex_core::Error::Config(e.to_string()))
    };
    let out = manifest.time("cv", || run_cv(&data, &split, &tokenizer, &labels, &train_cfg, make, args.jobs))?;

    let folds_path = args.out_dir.join("folds.tsv");
    let mut w = create(&folds_path)?;
    writeln!(w, "fold\tsize\tprecision\trecall\tf1")?;
    for f in &out.folds {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            f.fold,
            f.test_indices.len(),
            f.scores.precision,
            f.scores.recall,
            f.scores.f1
        )?;
    }
    writeln!(
        w,
        "pooled\t{}\t{}\t{}\t{}",
        data.len(),
        out.pooled.precision,
        out.pooled.recall,
        out.pooled.f1
    )?;
    finish(w, &folds_path)?;

    let scores_path = args.out_dir.join("scores.tsv");
    let mut w = create(&scores_path)?;
    let row = ScoreRow {
        model: cfg.head_kind()?.model_label().to_string(),
        task: labels.task.clone(),
        scores: out.pooled,
    };
    write_scores(&[row], &mut w)?;
    finish(w, &scores_path)?;

    let split_path = args.out_dir.join("splits.tsv");
    let mut w = create(&split_path)?;
    split.write_manifest(&data, &mut w)?;
    finish(w, &split_path)?;
    manifest
        .output("folds", &folds_path)
        .output("scores", &scores_path)
        .output("splits", &split_path);

    let records: Vec<_> = out
        .folds
        .iter()
        .flat_map(|f| f.predictions.iter().filter_map(|p| p.record.clone()))
        .collect();
    if !records.is_empty() {
        let rec_path = args.out_dir.join("records.tsv");
        let mut w = create(&rec_path)?;
        write_records(&records, &mut w)?;
        finish(w, &rec_path)?;
        manifest.output("records", &rec_path);
    }

    manifest.config = cfg.values.clone();
    manifest.config.insert("k".into(), args.k.to_string());
    manifest.config.insert("jobs".into(), args.jobs.to_string());
    manifest.seed = Some(train_cfg.seed);
    manifest.input("data", &args.data);
    manifest.write(&args.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    /// Combined HTML heatmap page (or ANSI text with `--ansi`).
    Heatmap,
    /// Mean attention per stem near the entities of positive instances.
    Stems,
    /// Positive versus negative mean attention for selected stems.
    Posneg,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, value_enum)]
    pub mode: AnalyzeMode,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Task whose negative label separates positive from negative records.
    #[arg(long, default_value = "ppi")]
    pub task: String,
    /// Comma-separated stems for `posneg`; defaults to the top 10 stems.
    #[arg(long, value_delimiter = ',')]
    pub stems: Vec<String>,
    #[arg(long)]
    pub ansi: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("analyze");
    let labels = LabelSet::for_task(&args.task)?;
    let records = read_records(open(&args.records)?).with_context(|| args.records.display().to_string())?;
    if records.is_empty() {
        bail!("input error: {} holds no attention records", args.records.display());
    }
    let positives: Vec<_> = records.iter().filter(|r| !labels.is_negative(&r.gold)).cloned().collect();
    let mut w = create(&args.out)?;
    match args.mode {
        AnalyzeMode::Heatmap if args.ansi => {
            for r in &records {
                writeln!(w, "{}", render_heatmap_ansi(r))?;
            }
        }
        AnalyzeMode::Heatmap => w.write_all(render_report(&records).as_bytes())?,
        AnalyzeMode::Stems => write_stem_weights(&global_trigger_weights(&positives, args.window)?, &mut w)?,
        AnalyzeMode::Posneg => {
            let stems = if args.stems.is_empty() {
                global_trigger_weights(&positives, args.window)?
                    .into_iter()
                    .take(10)
                    .map(|s| s.stem)
                    .collect()
            } else {
                args.stems.clone()
            };
            let rows = pos_neg_trigger_compare(&records, &labels.negative, &stems, args.window)?;
            write_comparison(&rows, &mut w)?;
        }
    }
    finish(w, &args.out)?;
    manifest
        .config
        .insert("mode".into(), format!("{:?}", args.mode).to_lowercase());
    manifest.config.insert("window".into(), args.window.to_string());
    manifest.config.insert("task".into(), labels.task.clone());
    manifest.input("records", &args.records);
    manifest.output("analysis", &args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    Ok(manifest)
}
