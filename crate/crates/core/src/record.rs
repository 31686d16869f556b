//! Per-instance attention weights from the pooling head.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{aggregate_to_words, EncodedSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub id: String,
    pub gold: String,
    pub predicted: String,
    /// Source words, entity tags included.
    pub words: Vec<String>,
    /// Token weights summed onto the words they came from.
    pub word_weights: Vec<f64>,
    /// Raw weights over every token position (zero at `[CLS]`, `[SEP]` and
    /// pads). Empty for records read back from TSV.
    pub token_weights: Vec<f64>,
    /// Token position to word index. Empty for records read back from TSV.
    pub alignment: Vec<Option<usize>>,
}

impl AttentionRecord {
    pub fn from_tokens(
        id: impl Into<String>,
        gold: impl Into<String>,
        predicted: impl Into<String>,
        encoded: &EncodedSequence,
        token_weights: Vec<f64>,
    ) -> Result<Self> {
        if token_weights.len() > encoded.word_alignment.len() {
            return Err(Error::Input(format!(
                "{} weights for {} token positions",
                token_weights.len(),
                encoded.word_alignment.len()
            )));
        }
        let mut weights = token_weights;
        weights.resize(encoded.word_alignment.len(), 0.0);
        let word_weights = aggregate_to_words(&weights, &encoded.word_alignment, encoded.words.len());
        Ok(AttentionRecord {
            id: id.into(),
            gold: gold.into(),
            predicted: predicted.into(),
            words: encoded.words.clone(),
            word_weights,
            token_weights: weights,
            alignment: encoded.word_alignment.clone(),
        })
    }

    pub fn check_alignment(&self) -> Result<()> {
        if self.words.len() != self.word_weights.len() {
            return Err(Error::Input(format!(
                "record {}: {} words but {} word weights",
                self.id,
                self.words.len(),
                self.word_weights.len()
            )));
        }
        Ok(())
    }
}

/// One line per record: `id, gold, predicted`, then `word:weight` pairs.
pub fn write_records(records: &[AttentionRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        r.check_alignment()?;
        write!(out, "{}\t{}\t{}", r.id, r.gold, r.predicted)?;
        for (w, a) in r.words.iter().zip(&r.word_weights) {
            write!(out, "\t{w}:{a}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_records(source: impl BufRead) -> Result<Vec<AttentionRecord>> {
    let mut records = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let mut next = |what: &str| {
            fields
                .next()
                .map(str::to_string)
                .ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: format!("missing {what}"),
                })
        };
        let id = next("id")?;
        let gold = next("gold label")?;
        let predicted = next("predicted label")?;
        let mut words = Vec::new();
        let mut word_weights = Vec::new();
        for pair in fields {
            let (w, a) = pair.rsplit_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("expected word:weight, got {pair:?}"),
            })?;
            let a: f64 = a.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad weight {a:?}"),
            })?;
            words.push(w.to_string());
            word_weights.push(a);
        }
        records.push(AttentionRecord {
            id,
            gold,
            predicted,
            words,
            word_weights,
            token_weights: Vec::new(),
            alignment: Vec::new(),
        });
    }
    Ok(records)
}
