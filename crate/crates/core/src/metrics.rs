//! Precision, recall and F1.
//!
//! Zero denominators give 0: P = 0 when nothing was predicted positive,
//! R = 0 when nothing is gold positive, F1 = 0 when P + R = 0.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // 2PR/(P+R) in count form, which is exact for small counts.
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Prf { precision, recall, f1 }
    }
}

/// Per-class TP/FP/FN tallies.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: BTreeMap<String, ClassCounts>,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn tally<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Input(format!(
                "{} gold labels but {} predictions",
                gold.len(),
                pred.len()
            )));
        }
        let mut counts = ConfusionCounts {
            total: gold.len(),
            ..Default::default()
        };
        for (g, p) in gold.iter().zip(pred) {
            let (g, p) = (g.as_ref(), p.as_ref());
            if g == p {
                counts.entry(g).tp += 1;
            } else {
                counts.entry(p).fp += 1;
                counts.entry(g).fn_ += 1;
            }
        }
        Ok(counts)
    }

    fn entry(&mut self, label: &str) -> &mut ClassCounts {
        self.classes.entry(label.to_string()).or_default()
    }

    pub fn get(&self, label: &str) -> ClassCounts {
        self.classes.get(label).copied().unwrap_or_default()
    }

    /// Adds another tally, e.g. to pool folds.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.total += other.total;
        for (label, c) in &other.classes {
            let e = self.entry(label);
            e.tp += c.tp;
            e.fp += c.fp;
            e.fn_ += c.fn_;
        }
    }

    /// Micro P/R/F1 over every class except `negative`.
    pub fn micro_excluding(&self, negative: &str) -> Prf {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (label, c) in &self.classes {
            if label != negative {
                tp += c.tp;
                fp += c.fp;
                fn_ += c.fn_;
            }
        }
        Prf::from_counts(tp, fp, fn_)
    }
}

pub fn binary_prf<S: AsRef<str>>(gold: &[S], pred: &[S], positive: &str) -> Result<Prf> {
    let c = ConfusionCounts::tally(gold, pred)?.get(positive);
    Ok(Prf::from_counts(c.tp, c.fp, c.fn_))
}

/// Micro-averaged scores over the non-negative classes of `labels`.
pub fn micro_prf_nonneg<S: AsRef<str>>(gold: &[S], pred: &[S], labels: &LabelSet) -> Result<Prf> {
    for l in gold.iter().chain(pred) {
        if labels.index(l.as_ref()).is_none() {
            return Err(Error::Input(format!("unknown label {:?}", l.as_ref())));
        }
    }
    Ok(ConfusionCounts::tally(gold, pred)?.micro_excluding(&labels.negative))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub task: String,
    pub scores: Prf,
}

/// Writes `model, task, P, R, F1` with scores as percentages to one decimal.
pub fn write_scores(rows: &[ScoreRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "model\ttask\tprecision\trecall\tf1")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{:.1}\t{:.1}\t{:.1}",
            r.model,
            r.task,
            100.0 * r.scores.precision,
            100.0 * r.scores.recall,
            100.0 * r.scores.f1
        )?;
    }
    Ok(())
}
