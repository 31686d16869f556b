//! Fine-tuning, evaluation and cross-validation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_folds, DatasetSplit, LabelSet, RelationInstance};
use crate::encoder::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionCounts, Prf};
use crate::model::{predict, Model, Prediction};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::tokenizer::{EncodedSequence, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Train the head only; encoder weights stay as initialised.
    pub freeze_encoder: bool,
    /// Score the dev set after every epoch and keep the best epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    /// lr 2e-5, batch 32, 10 epochs, 128 tokens.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 10,
            max_len: 128,
            seed: 42,
            freeze_encoder: false,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    /// Settings for a small randomly initialised encoder.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 30,
            max_len: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len must be at least 3, got {}", self.max_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: String,
    pub scores: Prf,
    pub loss: f64,
}

pub fn write_trace(rows: &[TraceRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch\tsplit\tprecision\trecall\tf1\tloss")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.split, r.scores.precision, r.scores.recall, r.scores.f1, r.loss
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    /// Epoch whose parameters were returned (1-based; 0 means untrained).
    pub selected_epoch: usize,
}

fn encode_all(tokenizer: &Tokenizer, labels: &LabelSet, set: &[RelationInstance], max_len: usize) -> Result<Vec<(EncodedSequence, usize)>> {
    set.iter()
        .map(|inst| {
            let gold = labels
                .index(&inst.label)
                .ok_or_else(|| Error::Input(format!("instance {}: unknown label {:?}", inst.id, inst.label)))?;
            Ok((tokenizer.encode(&inst.sentence, max_len)?, gold))
        })
        .collect()
}

fn micro(labels: &LabelSet, gold: &[usize], pred: &[usize]) -> Result<Prf> {
    let g: Vec<&str> = gold.iter().map(|&i| labels.label(i)).collect();
    let p: Vec<&str> = pred.iter().map(|&i| labels.label(i)).collect();
    Ok(ConfusionCounts::tally(&g, &p)?.micro_excluding(&labels.negative))
}

/// Scores and mean cross-entropy of `model` on pre-encoded data.
fn score(model: &Model, labels: &LabelSet, data: &[(EncodedSequence, usize)]) -> Result<(Prf, f64)> {
    let mut pred = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for (encoded, gold) in data {
        let (probs, _) = model.infer(encoded)?;
        loss -= probs[*gold].ln();
        pred.push(crate::heads::argmax(&probs));
    }
    let gold: Vec<usize> = data.iter().map(|(_, g)| *g).collect();
    Ok((micro(labels, &gold, &pred)?, loss / data.len().max(1) as f64))
}

/// Mini-batch Adam on mean cross-entropy. Returns the parameters of the
/// epoch with the best dev micro-F1 when a dev set is given and scored
/// every epoch (earliest epoch wins ties), otherwise the final parameters.
pub fn fine_tune(
    model: Model,
    tokenizer: &Tokenizer,
    labels: &LabelSet,
    train: &[RelationInstance],
    dev: Option<&[RelationInstance]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if labels.len() != model.head_spec.num_classes {
        return Err(Error::Config(format!(
            "label set has {} classes but the head predicts {}",
            labels.len(),
            model.head_spec.num_classes
        )));
    }
    if config.max_len != model.encoder_config.max_len {
        return Err(Error::Config(format!(
            "max_len {} does not match the encoder's {}",
            config.max_len, model.encoder_config.max_len
        )));
    }
    let train_data = encode_all(tokenizer, labels, train, config.max_len)?;
    let dev_data = dev
        .filter(|d| !d.is_empty())
        .map(|d| encode_all(tokenizer, labels, d, config.max_len))
        .transpose()?;

    let mut model = model;
    let num_encoder = model.encoder.named().len();
    let skip = if config.freeze_encoder { num_encoder } else { 0 };
    let mut adam = AdamState::new(
        AdamConfig::with_lr(config.learning_rate),
        model.named().into_iter().skip(skip).map(|(_, t)| t),
    );
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut gold = Vec::with_capacity(order.len());
        let mut pred = Vec::with_capacity(order.len());
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&EncodedSequence, usize)> = chunk.iter().map(|&i| (&train_data[i].0, train_data[i].1)).collect();
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64, b as u64 + 1]));
            let result = model
                .batch_loss_and_grads(&batch, Some(&mut dropout_rng), !config.freeze_encoder)
                .map_err(|e| match e {
                    Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch}, batch {}: {msg}", b + 1)),
                    other => other,
                })?;
            loss_sum += result.loss * chunk.len() as f64;
            gold.extend(batch.iter().map(|(_, g)| *g));
            pred.extend(result.predicted);
            let mut params: Vec<&mut Tensor> = model.tensors_mut().into_iter().skip(skip).collect();
            adam_step(&mut params, &result.grads[skip..], &mut adam)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
        }
        trace.push(TraceRow {
            epoch,
            split: "train".into(),
            scores: micro(labels, &gold, &pred)?,
            loss: loss_sum / train_data.len() as f64,
        });
        log::info!("epoch {epoch}: train loss {:.4}", loss_sum / train_data.len() as f64);

        let score_dev = config.eval_each_epoch || epoch == config.epochs;
        if let (Some(dev_data), true) = (&dev_data, score_dev) {
            let (scores, loss) = score(&model, labels, dev_data)?;
            trace.push(TraceRow {
                epoch,
                split: "dev".into(),
                scores,
                loss,
            });
            if config.eval_each_epoch && best.as_ref().is_none_or(|(f1, _, _)| scores.f1 > *f1) {
                best = Some((scores.f1, epoch, model.clone()));
            }
        }
    }
    let (model, selected_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => (model, config.epochs),
    };
    Ok(TrainOutcome {
        model,
        trace,
        selected_epoch,
    })
}

/// Micro-averaged non-negative scores of predictions against gold labels.
pub fn evaluate(labels: &LabelSet, instances: &[RelationInstance], predictions: &[Prediction]) -> Result<(Prf, ConfusionCounts)> {
    let gold: Vec<&str> = instances.iter().map(|i| i.label.as_str()).collect();
    let pred: Vec<&str> = predictions.iter().map(|p| p.label.as_str()).collect();
    let counts = ConfusionCounts::tally(&gold, &pred)?;
    Ok((counts.micro_excluding(&labels.negative), counts))
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub scores: Prf,
    pub counts: ConfusionCounts,
    pub test_indices: Vec<usize>,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    /// Scores from the confusion counts summed over folds.
    pub pooled: Prf,
}

/// Trains one model per fold on the other folds and scores it on the held
/// out one. `make_model(fold)` supplies the initial model; fold `i` trains
/// with seed `config.seed + i`. Folds run on up to `jobs` threads.
pub fn run_cv(
    instances: &[RelationInstance],
    split: &DatasetSplit,
    tokenizer: &Tokenizer,
    labels: &LabelSet,
    config: &TrainConfig,
    make_model: impl Fn(usize) -> Result<Model> + Sync,
    jobs: usize,
) -> Result<CvOutcome> {
    let k = split.partitions.len();
    let run_fold = |fold: usize| -> Result<FoldResult> {
        let train: Vec<RelationInstance> = split.complement(fold).into_iter().map(|i| instances[i].clone()).collect();
        let test_indices = split.partitions[fold].1.clone();
        let test: Vec<RelationInstance> = test_indices.iter().map(|&i| instances[i].clone()).collect();
        let fold_config = TrainConfig {
            seed: config.seed.wrapping_add(fold as u64),
            ..config.clone()
        };
        let outcome = fine_tune(make_model(fold)?, tokenizer, labels, &train, None, &fold_config)?;
        let predictions = predict(&outcome.model, tokenizer, labels, &test)?;
        let (scores, counts) = evaluate(labels, &test, &predictions)?;
        log::info!("fold {fold}: F1 {:.4}", scores.f1);
        Ok(FoldResult {
            fold,
            scores,
            counts,
            test_indices,
            predictions,
        })
    };

    let jobs = jobs.clamp(1, k.max(1));
    let mut results: Vec<Option<Result<FoldResult>>> = (0..k).map(|_| None).collect();
    if jobs == 1 {
        for (fold, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(fold));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let collected = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let fold = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if fold >= k {
                        break;
                    }
                    let r = run_fold(fold);
                    collected.lock().expect("fold worker panicked")[fold] = Some(r);
                });
            }
        });
    }
    let folds = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = ConfusionCounts::default();
    for f in &folds {
        pooled.merge(&f.counts);
    }
    Ok(CvOutcome {
        pooled: pooled.micro_excluding(&labels.negative),
        folds,
    })
}

/// Stratified `k`-fold split followed by [`run_cv`].
pub fn run_kfold(
    instances: &[RelationInstance],
    k: usize,
    tokenizer: &Tokenizer,
    labels: &LabelSet,
    config: &TrainConfig,
    make_model: impl Fn(usize) -> Result<Model> + Sync,
    jobs: usize,
) -> Result<CvOutcome> {
    let split = make_folds(instances, k, config.seed)?;
    run_cv(instances, &split, tokenizer, labels, config, make_model, jobs)
}
