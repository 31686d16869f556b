use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::porter::porter_stem;
use crate::error::{Error, Result};
use crate::record::AttentionRecord;
use crate::tokenizer::is_entity_tag;

pub const DEFAULT_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemWeight {
    pub stem: String,
    pub mean_weight: f64,
    pub support: usize,
}

/// Words within `window` positions on either side of any entity tag, as
/// `(stem, weight)` pairs. Each word position counts once even when it is
/// near both tags. Tags and punctuation-only words are never selected and do
/// not count toward the distance.
pub fn window_occurrences(record: &AttentionRecord, window: usize) -> Result<Vec<(String, f64)>> {
    record.check_alignment()?;
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let kept: Vec<usize> = (0..record.words.len())
        .filter(|&i| record.words[i].chars().any(char::is_alphanumeric))
        .collect();
    let mut selected = BTreeSet::new();
    for (pos, &i) in kept.iter().enumerate() {
        if !is_entity_tag(&record.words[i]) {
            continue;
        }
        let lo = pos.saturating_sub(window);
        let hi = (pos + window).min(kept.len() - 1);
        for &j in &kept[lo..=hi] {
            if !is_entity_tag(&record.words[j]) {
                selected.insert(j);
            }
        }
    }
    Ok(selected
        .into_iter()
        .map(|j| (porter_stem(&record.words[j]), record.word_weights[j]))
        .collect())
}

fn accumulate(records: &[&AttentionRecord], window: usize) -> Result<BTreeMap<String, (f64, usize)>> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        for (stem, w) in window_occurrences(r, window)? {
            let e = acc.entry(stem).or_default();
            e.0 += w;
            e.1 += 1;
        }
    }
    Ok(acc)
}

/// Mean in-window weight per stem, highest first (ties by stem).
pub fn global_trigger_weights(records: &[AttentionRecord], window: usize) -> Result<Vec<StemWeight>> {
    let refs: Vec<&AttentionRecord> = records.iter().collect();
    let mut out: Vec<StemWeight> = accumulate(&refs, window)?
        .into_iter()
        .map(|(stem, (sum, n))| StemWeight {
            stem,
            mean_weight: sum / n as f64,
            support: n,
        })
        .collect();
    out.sort_by(|a, b| b.mean_weight.total_cmp(&a.mean_weight).then_with(|| a.stem.cmp(&b.stem)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemComparison {
    pub stem: String,
    /// `None` when the stem never occurs in a positive window.
    pub pos_mean: Option<f64>,
    pub pos_support: usize,
    pub neg_mean: Option<f64>,
    pub neg_support: usize,
}

/// Mean in-window weight of each stem in gold-positive versus gold-negative
/// records. A record is negative when its gold label equals `negative`.
pub fn pos_neg_trigger_compare(
    records: &[AttentionRecord],
    negative: &str,
    stems: &[String],
    window: usize,
) -> Result<Vec<StemComparison>> {
    let (neg, pos): (Vec<&AttentionRecord>, Vec<&AttentionRecord>) =
        records.iter().partition(|r| r.gold == negative);
    let pos_acc = accumulate(&pos, window)?;
    let neg_acc = accumulate(&neg, window)?;
    let mean = |acc: &BTreeMap<String, (f64, usize)>, stem: &str| match acc.get(stem) {
        Some(&(sum, n)) => (Some(sum / n as f64), n),
        None => (None, 0),
    };
    Ok(stems
        .iter()
        .map(|stem| {
            let (pos_mean, pos_support) = mean(&pos_acc, stem);
            let (neg_mean, neg_support) = mean(&neg_acc, stem);
            StemComparison {
                stem: stem.clone(),
                pos_mean,
                pos_support,
                neg_mean,
                neg_support,
            }
        })
        .collect())
}

pub fn write_stem_weights(rows: &[StemWeight], mut out: impl Write) -> Result<()> {
    writeln!(out, "stem\tmean_weight\tsupport")?;
    for r in rows {
        writeln!(out, "{}\t{}\t{}", r.stem, r.mean_weight, r.support)?;
    }
    Ok(())
}

/// Undefined means are written as `NA`.
pub fn write_comparison(rows: &[StemComparison], mut out: impl Write) -> Result<()> {
    let fmt = |m: Option<f64>| m.map_or_else(|| "NA".to_string(), |v| v.to_string());
    writeln!(out, "stem\tpos_mean\tpos_support\tneg_mean\tneg_support")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.stem,
            fmt(r.pos_mean),
            r.pos_support,
            fmt(r.neg_mean),
            r.neg_support
        )?;
    }
    Ok(())
}
