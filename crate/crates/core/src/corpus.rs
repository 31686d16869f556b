//! Relation instances, label sets, TSV interchange, cross-validation folds
//! and the synthetic trigger-word corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{self, Vocabulary, CONTINUATION_PREFIX, ENTITY_TAGS, SPECIAL_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Protein,
    Drug,
    Chemical,
    Gene,
}

impl EntityType {
    pub fn tag(self) -> &'static str {
        match self {
            EntityType::Protein => "@PROTEIN$",
            EntityType::Drug => "@DRUG$",
            EntityType::Chemical => "@CHEMICAL$",
            EntityType::Gene => "@GENE$",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [
            EntityType::Protein,
            EntityType::Drug,
            EntityType::Chemical,
            EntityType::Gene,
        ]
        .into_iter()
        .find(|t| t.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub task: String,
    pub labels: Vec<String>,
    pub negative: String,
    /// Entity types whose tags may mark the candidate pair.
    pub entity_types: Vec<EntityType>,
}

impl LabelSet {
    pub fn ppi() -> Self {
        LabelSet {
            task: "ppi".into(),
            labels: vec!["Positive".into(), "Negative".into()],
            negative: "Negative".into(),
            entity_types: vec![EntityType::Protein],
        }
    }

    pub fn ddi() -> Self {
        LabelSet {
            task: "ddi".into(),
            labels: ["ADVICE", "EFFECT", "INT", "MECHANISM", "negative"]
                .map(String::from)
                .to_vec(),
            negative: "negative".into(),
            entity_types: vec![EntityType::Drug],
        }
    }

    pub fn chemprot() -> Self {
        LabelSet {
            task: "chemprot".into(),
            labels: ["CPR:3", "CPR:4", "CPR:5", "CPR:6", "CPR:9", "negative"]
                .map(String::from)
                .to_vec(),
            negative: "negative".into(),
            entity_types: vec![EntityType::Chemical, EntityType::Gene],
        }
    }

    pub fn for_task(task: &str) -> Result<Self> {
        match task.to_ascii_lowercase().as_str() {
            "ppi" | "aimed" | "synthetic" => Ok(Self::ppi()),
            "ddi" => Ok(Self::ddi()),
            "chemprot" => Ok(Self::chemprot()),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected one of ppi, ddi, chemprot"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn is_negative(&self, label: &str) -> bool {
        label == self.negative
    }

    pub fn negative_index(&self) -> usize {
        self.index(&self.negative).expect("negative label is a member")
    }

    /// Tags accepted as candidate-pair markers for this task.
    pub fn tags(&self) -> Vec<&'static str> {
        self.entity_types.iter().map(|t| t.tag()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub id: String,
    /// Sentence with the candidate pair already replaced by entity tags.
    pub sentence: String,
    pub entity_type: EntityType,
    pub label: String,
}

impl RelationInstance {
    /// Validates a masked sentence and label against `labels`.
    pub fn new(id: impl Into<String>, sentence: impl Into<String>, label: impl Into<String>, labels: &LabelSet) -> Result<Self> {
        let sentence = sentence.into();
        let label = label.into();
        if labels.index(&label).is_none() {
            return Err(Error::Input(format!(
                "label {label:?} is not one of {:?}",
                labels.labels
            )));
        }
        let tags: Vec<String> = tokenizer::pre_split(&sentence)
            .into_iter()
            .filter(|w| tokenizer::is_entity_tag(w))
            .collect();
        let allowed = labels.tags();
        if tags.len() != 2 || tags.iter().any(|t| !allowed.contains(&t.as_str())) {
            return Err(Error::Input(format!(
                "expected exactly two entity tags from {allowed:?}, found {tags:?}"
            )));
        }
        let entity_type = EntityType::from_tag(&tags[0]).expect("tag from known set");
        Ok(RelationInstance {
            id: id.into(),
            sentence,
            entity_type,
            label,
        })
    }
}

/// Replaces two character spans with entity tags. Spans are character
/// (not byte) offsets into `raw`.
pub fn mask_entities(raw: &str, span1: Range<usize>, span2: Range<usize>, tag1: &str, tag2: &str) -> Result<String> {
    let chars: Vec<char> = raw.chars().collect();
    for (name, s) in [("first", &span1), ("second", &span2)] {
        if s.start >= s.end || s.end > chars.len() {
            return Err(Error::Annotation(format!(
                "{name} span {}..{} invalid for sentence of {} characters",
                s.start,
                s.end,
                chars.len()
            )));
        }
    }
    if span1.start < span2.end && span2.start < span1.end {
        return Err(Error::Annotation(format!(
            "spans {}..{} and {}..{} overlap",
            span1.start, span1.end, span2.start, span2.end
        )));
    }
    let mut spans = [(span1, tag1), (span2, tag2)];
    // Right-to-left so earlier offsets stay valid.
    spans.sort_by_key(|(s, _)| std::cmp::Reverse(s.start));
    let mut out = chars;
    for (span, tag) in spans {
        out.splice(span, tag.chars());
    }
    Ok(out.into_iter().collect())
}

/// Parses `id \t sentence \t label` lines. Errors carry 1-based line numbers.
pub fn parse_tsv(source: impl BufRead, labels: &LabelSet) -> Result<Vec<RelationInstance>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let inst = RelationInstance::new(fields[0], fields[1], fields[2], labels).map_err(|e| Error::Parse {
            line: line_no,
            message: match e {
                Error::Input(m) => m,
                other => other.to_string(),
            },
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_tsv(instances: &[RelationInstance], mut out: impl Write) -> Result<()> {
    for inst in instances {
        writeln!(out, "{}\t{}\t{}", inst.id, inst.sentence, inst.label)?;
    }
    Ok(())
}

/// Named, disjoint partitions of instance indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub partitions: Vec<(String, Vec<usize>)>,
}

impl DatasetSplit {
    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.partitions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Every index not in partition `held_out`.
    pub fn complement(&self, held_out: usize) -> Vec<usize> {
        let mut rest: Vec<usize> = self
            .partitions
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held_out)
            .flat_map(|(_, (_, v))| v.iter().copied())
            .collect();
        rest.sort_unstable();
        rest
    }

    /// Split manifest: one `partition \t instance id` line per member.
    pub fn write_manifest(&self, instances: &[RelationInstance], mut out: impl Write) -> Result<()> {
        for (name, members) in &self.partitions {
            for &i in members {
                writeln!(out, "{name}\t{}", instances[i].id)?;
            }
        }
        Ok(())
    }

    pub fn read_manifest(source: impl BufRead, instances: &[RelationInstance]) -> Result<Self> {
        let by_id: BTreeMap<&str, usize> = instances.iter().enumerate().map(|(i, x)| (x.id.as_str(), i)).collect();
        let mut partitions: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (name, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `partition \\t id`".into(),
            })?;
            let idx = *by_id.get(id).ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("unknown instance id {id:?}"),
            })?;
            match partitions.iter_mut().find(|(n, _)| n == name) {
                Some((_, v)) => v.push(idx),
                None => partitions.push((name.to_string(), vec![idx])),
            }
        }
        Ok(DatasetSplit { partitions })
    }
}

/// Label-stratified k-fold split. Each label stratum is shuffled under
/// `seed` and dealt round-robin, continuing where the previous stratum
/// stopped, so fold sizes differ by at most one overall and within each
/// label.
pub fn make_folds(instances: &[RelationInstance], k: usize, seed: u64) -> Result<DatasetSplit> {
    make_folds_by(instances, k, seed, |i| i.id.clone(), false)
}

/// Like [`make_folds`] but keeps every group (e.g. an abstract) inside one
/// fold. `group_of` maps an instance to its group key.
pub fn make_group_folds(
    instances: &[RelationInstance],
    k: usize,
    seed: u64,
    group_of: impl Fn(&RelationInstance) -> String,
) -> Result<DatasetSplit> {
    make_folds_by(instances, k, seed, group_of, true)
}

fn make_folds_by(
    instances: &[RelationInstance],
    k: usize,
    seed: u64,
    group_of: impl Fn(&RelationInstance) -> String,
    grouped: bool,
) -> Result<DatasetSplit> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if instances.len() < k {
        return Err(Error::Config(format!(
            "{} instances cannot fill {k} folds",
            instances.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];

    if grouped {
        // Groups are dealt largest-first to the currently smallest fold.
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            groups.entry(group_of(inst)).or_default().push(i);
        }
        if groups.len() < k {
            return Err(Error::Config(format!("{} groups cannot fill {k} folds", groups.len())));
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        groups.shuffle(&mut rng);
        groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
        for g in groups {
            let target = (0..k).min_by_key(|&f| (folds[f].len(), f)).unwrap();
            folds[target].extend(g);
        }
    } else {
        let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            strata.entry(inst.label.as_str()).or_default().push(i);
        }
        let mut next = 0;
        for members in strata.values_mut() {
            members.shuffle(&mut rng);
            for &i in members.iter() {
                folds[next].push(i);
                next = (next + 1) % k;
            }
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(DatasetSplit {
        partitions: folds
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("fold_{i}"), v))
            .collect(),
    })
}

/// Shuffled train/test split with `test_fraction` of each label held out.
pub fn train_test_split(instances: &[RelationInstance], test_fraction: f64, seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        strata.entry(inst.label.as_str()).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    DatasetSplit {
        partitions: vec![("train".into(), train), ("test".into(), test)],
    }
}

/// Knobs for the synthetic trigger-word corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub fillers: Vec<String>,
    pub triggers: Vec<String>,
    /// Filler words placed on each side of the entity pair, inclusive range.
    pub filler_span: (usize, usize),
    /// Negation cues. When non-empty, `negated_fraction` of the negatives
    /// carry a trigger between the entities preceded by a cue, so the
    /// trigger word occurs in both classes.
    pub cues: Vec<String>,
    pub negated_fraction: f64,
    /// Fraction of the negatives that get a trigger right outside the pair
    /// (just before the first tag or just after the second) while the slot
    /// between the tags holds a filler.
    pub decoy_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n: usize, fillers: &[&str], triggers: &[&str], seed: u64) -> Self {
        SynthConfig {
            n,
            fillers: fillers.iter().map(|s| s.to_string()).collect(),
            triggers: triggers.iter().map(|s| s.to_string()).collect(),
            filler_span: (0, 4),
            cues: Vec::new(),
            negated_fraction: 0.0,
            decoy_fraction: 0.0,
            seed,
        }
    }

    /// Half of the negatives carry a trigger word just outside the entity
    /// pair, so only its position separates the classes.
    pub fn decoy(n: usize, seed: u64) -> Self {
        SynthConfig {
            decoy_fraction: 0.5,
            ..Self::new(n, &SYNTH_FILLERS, &SYNTH_TRIGGERS, seed)
        }
    }

    /// Forty opaque filler tokens `f0..f39`, two to six per side.
    pub fn opaque_fillers(n: usize, seed: u64) -> Self {
        let fillers: Vec<String> = (0..40).map(|i| format!("f{i}")).collect();
        let refs: Vec<&str> = fillers.iter().map(String::as_str).collect();
        SynthConfig {
            filler_span: (2, 6),
            ..Self::new(n, &refs, &SYNTH_TRIGGERS, seed)
        }
    }
}

pub const SYNTH_FILLERS: [&str; 40] = [
    "the", "a", "of", "in", "cells", "was", "observed", "with", "and", "study", "these", "results",
    "suggest", "human", "levels", "after", "treatment", "both", "samples", "were", "analyzed", "by",
    "using", "expression", "data", "from", "patients", "we", "found", "that", "is", "also", "present",
    "during", "cycle", "under", "normal", "conditions", "tissue", "type",
];

pub const SYNTH_TRIGGERS: [&str; 3] = ["activates", "activated", "activation"];

pub const SYNTH_CUES: [&str; 2] = ["not", "never"];

/// `n` sentences `filler* @PROTEIN$ w @PROTEIN$ filler*`, labelled Positive
/// iff `w` is a trigger word; half of each label.
pub fn synth_trigger_dataset(n: usize, fillers: &[&str], triggers: &[&str], seed: u64) -> Result<Vec<RelationInstance>> {
    synth_dataset(&SynthConfig::new(n, fillers, triggers, seed))
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<RelationInstance>> {
    if cfg.n < 2 {
        return Err(Error::Config(format!("synthetic corpus needs n >= 2, got {}", cfg.n)));
    }
    if cfg.fillers.is_empty() || cfg.triggers.is_empty() {
        return Err(Error::Config("synthetic corpus needs fillers and triggers".into()));
    }
    let triggers: BTreeSet<&str> = cfg.triggers.iter().map(String::as_str).collect();
    if let Some(w) = cfg.fillers.iter().find(|w| triggers.contains(w.as_str()) || cfg.cues.contains(w)) {
        return Err(Error::Config(format!("filler {w:?} is also a trigger or cue")));
    }
    let fractions_ok = |f: f64| (0.0..=1.0).contains(&f);
    if !fractions_ok(cfg.negated_fraction)
        || !fractions_ok(cfg.decoy_fraction)
        || !fractions_ok(cfg.negated_fraction + cfg.decoy_fraction)
    {
        return Err(Error::Config("negated and decoy fractions must lie in [0, 1] and sum to at most 1".into()));
    }
    let (lo, hi) = cfg.filler_span;
    if lo > hi {
        return Err(Error::Config(format!("bad filler span {lo}..={hi}")));
    }

    let labels = LabelSet::ppi();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut positive: Vec<bool> = (0..cfg.n).map(|i| i < cfg.n / 2).collect();
    positive.shuffle(&mut rng);
    let tag = EntityType::Protein.tag();

    let mut out = Vec::with_capacity(cfg.n);
    for (i, &pos) in positive.iter().enumerate() {
        let mut words: Vec<&str> = Vec::new();
        let left = rng.random_range(lo..=hi);
        words.extend((0..left).map(|_| cfg.fillers.choose(&mut rng).unwrap().as_str()));
        let mut decoy = None;
        let mut middle: Vec<&str> = Vec::new();
        if pos {
            middle.push(cfg.triggers.choose(&mut rng).unwrap());
        } else {
            let needs_draw = (!cfg.cues.is_empty() && cfg.negated_fraction > 0.0) || cfg.decoy_fraction > 0.0;
            let r: f64 = if needs_draw { rng.random() } else { 1.0 };
            if !cfg.cues.is_empty() && r < cfg.negated_fraction {
                middle.push(cfg.cues.choose(&mut rng).unwrap());
                middle.push(cfg.triggers.choose(&mut rng).unwrap());
            } else {
                middle.push(cfg.fillers.choose(&mut rng).unwrap());
                if r >= cfg.negated_fraction && r < cfg.negated_fraction + cfg.decoy_fraction {
                    decoy = Some((rng.random::<bool>(), cfg.triggers.choose(&mut rng).unwrap().as_str()));
                }
            }
        }
        if let Some((true, w)) = decoy {
            words.push(w);
        }
        words.push(tag);
        words.extend(middle);
        words.push(tag);
        if let Some((false, w)) = decoy {
            words.push(w);
        }
        let right = rng.random_range(lo..=hi);
        words.extend((0..right).map(|_| cfg.fillers.choose(&mut rng).unwrap().as_str()));
        let label = if pos { "Positive" } else { "Negative" };
        out.push(RelationInstance::new(format!("synth{i:05}"), words.join(" "), label, &labels)?);
    }
    Ok(out)
}

/// Vocabulary covering every word of `sentences` whole, plus single
/// characters and their continuation pieces so unseen words still
/// decompose.
pub fn toy_vocabulary<'a>(sentences: impl IntoIterator<Item = &'a str>, lowercase: bool) -> Vocabulary {
    let mut words = BTreeSet::new();
    let mut chars = BTreeSet::new();
    for s in sentences {
        for w in tokenizer::pre_split(s) {
            if tokenizer::is_entity_tag(&w) {
                continue;
            }
            let w = if lowercase { w.to_lowercase() } else { w };
            chars.extend(w.chars());
            words.insert(w);
        }
    }
    chars.extend(('a'..='z').chain('0'..='9'));
    let mut tokens: Vec<String> = SPECIAL_TOKENS
        .iter()
        .chain(ENTITY_TAGS.iter())
        .map(|s| s.to_string())
        .collect();
    let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut seen = reserved.clone();
    let candidates = words
        .into_iter()
        .chain(chars.iter().map(|c| c.to_string()))
        .chain(chars.iter().map(|c| format!("{CONTINUATION_PREFIX}{c}")));
    for tok in candidates {
        if seen.insert(tok.clone()) {
            tokens.push(tok);
        }
    }
    Vocabulary::from_tokens(tokens).expect("tokens are unique")
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().trim_matches(|c| c == '@' || c == '$') {
            "PROTEIN" => Ok(EntityType::Protein),
            "DRUG" => Ok(EntityType::Drug),
            "CHEMICAL" => Ok(EntityType::Chemical),
            "GENE" => Ok(EntityType::Gene),
            other => Err(Error::Input(format!("unknown entity type {other:?}"))),
        }
    }
}
