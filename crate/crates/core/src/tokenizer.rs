//! WordPiece tokenization with `[CLS]`/`[SEP]` framing and word alignment.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SPECIAL_TOKENS: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Entity placeholders substituted for entity mentions before tokenization.
pub const ENTITY_TAGS: [&str; 4] = ["@PROTEIN$", "@DRUG$", "@CHEMICAL$", "@GENE$"];

pub const CONTINUATION_PREFIX: &str = "##";

const MAX_WORD_CHARS: usize = 100;

pub fn is_entity_tag(word: &str) -> bool {
    ENTITY_TAGS.contains(&word)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    inserted: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in order, appending any missing
    /// special tokens or entity tags.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            inserted: Vec::new(),
        };
        for (line, tok) in tokens.into_iter().enumerate() {
            let tok = tok.into();
            if vocab.index.contains_key(&tok) {
                return Err(Error::Format {
                    line: line + 1,
                    message: format!("duplicate token {tok:?}"),
                });
            }
            vocab.push(tok);
        }
        for required in SPECIAL_TOKENS.iter().chain(ENTITY_TAGS.iter()) {
            if !vocab.index.contains_key(*required) {
                log::warn!("vocabulary lacks {required}; appending it");
                vocab.inserted.push(required.to_string());
                vocab.push(required.to_string());
            }
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Required tokens that were missing from the source and appended.
    pub fn inserted_tokens(&self) -> &[String] {
        &self.inserted
    }

    fn special(&self, tok: &str) -> usize {
        self.index[tok]
    }

    pub fn pad_id(&self) -> usize {
        self.special(PAD)
    }

    pub fn unk_id(&self) -> usize {
        self.special(UNK)
    }

    pub fn cls_id(&self) -> usize {
        self.special(CLS)
    }

    pub fn sep_id(&self) -> usize {
        self.special(SEP)
    }

    pub fn save(&self, mut out: impl Write) -> Result<()> {
        for tok in &self.tokens {
            writeln!(out, "{tok}")?;
        }
        Ok(())
    }
}

/// Reads a vocabulary file: one token per line, id = zero-based line number.
pub fn load_vocab(source: impl BufRead) -> Result<Vocabulary> {
    let mut tokens = Vec::new();
    for line in source.lines() {
        let line = line?;
        let tok = line.strip_suffix('\r').unwrap_or(&line);
        tokens.push(tok.to_string());
    }
    Vocabulary::from_tokens(tokens)
}

/// Greedy longest-match-first WordPiece split of a single word.
pub fn wordpiece_tokenize(word: &str, vocab: &Vocabulary) -> Vec<String> {
    wordpiece_ids(word, vocab)
        .into_iter()
        .map(|id| vocab.tokens[id].clone())
        .collect()
}

fn wordpiece_ids(word: &str, vocab: &Vocabulary) -> Vec<usize> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
        return vec![vocab.unk_id()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION_PREFIX);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => pieces.push(id),
            None => return vec![vocab.unk_id()],
        }
        start = end;
    }
    pieces
}

/// Splits on whitespace and isolates ASCII punctuation, keeping entity tags
/// whole.
pub fn pre_split(sentence: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut rest = sentence;
    while let Some(c) = rest.chars().next() {
        if let Some(tag) = ENTITY_TAGS.iter().find(|t| rest.starts_with(**t)) {
            flush(&mut current, &mut words);
            words.push(tag.to_string());
            rest = &rest[tag.len()..];
            continue;
        }
        if c.is_whitespace() {
            flush(&mut current, &mut words);
        } else if c.is_ascii_punctuation() {
            flush(&mut current, &mut words);
            words.push(c.to_string());
        } else {
            current.push(c);
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut current, &mut words);
    words
}

fn flush(current: &mut String, words: &mut Vec<String>) {
    if !current.is_empty() {
        words.push(std::mem::take(current));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// Source-word index per position; `None` for `[CLS]`, `[SEP]` and pads.
    pub word_alignment: Vec<Option<usize>>,
    /// Pre-split words that contributed at least one token.
    pub words: Vec<String>,
    /// Number of content tokens N; they sit at positions `1..=N`.
    pub num_content: usize,
}

impl EncodedSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of non-pad positions (`N + 2`).
    pub fn valid_len(&self) -> usize {
        self.num_content + 2
    }

    pub fn sep_index(&self) -> usize {
        self.num_content + 1
    }

    /// Word index of each content token.
    pub fn content_alignment(&self) -> Vec<usize> {
        self.word_alignment[1..=self.num_content]
            .iter()
            .map(|a| a.expect("content tokens are aligned"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub lowercase: bool,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Tokenizer {
            vocab,
            lowercase: false,
        }
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn words(&self, sentence: &str) -> Vec<String> {
        let mut words = pre_split(sentence);
        if self.lowercase {
            for w in &mut words {
                if !is_entity_tag(w) {
                    *w = w.to_lowercase();
                }
            }
        }
        words
    }

    pub fn encode(&self, sentence: &str, max_len: usize) -> Result<EncodedSequence> {
        if max_len < 3 {
            return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
        }
        let budget = max_len - 2;
        let words = self.words(sentence);
        let mut ids = vec![self.vocab.cls_id()];
        let mut word_alignment = vec![None];
        let mut kept_words = 0;
        'outer: for (w, word) in words.iter().enumerate() {
            for id in wordpiece_ids(word, &self.vocab) {
                if ids.len() > budget {
                    break 'outer;
                }
                ids.push(id);
                word_alignment.push(Some(w));
                kept_words = w + 1;
            }
        }
        let num_content = ids.len() - 1;
        ids.push(self.vocab.sep_id());
        word_alignment.push(None);
        let valid = ids.len();
        ids.resize(max_len, self.vocab.pad_id());
        word_alignment.resize(max_len, None);
        let mask = (0..max_len).map(|i| i < valid).collect();
        Ok(EncodedSequence {
            ids,
            mask,
            segment_ids: vec![0; max_len],
            position_ids: (0..max_len).collect(),
            word_alignment,
            words: words.into_iter().take(kept_words).collect(),
            num_content,
        })
    }

    /// Reassembles words from content tokens, dropping continuation markers.
    pub fn decode(&self, encoded: &EncodedSequence) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let mut last = None;
        for pos in 1..=encoded.num_content {
            let tok = &self.vocab.tokens[encoded.ids[pos]];
            let piece = tok.strip_prefix(CONTINUATION_PREFIX).unwrap_or(tok);
            if encoded.word_alignment[pos] == last {
                words.last_mut().expect("continuation follows a word").push_str(piece);
            } else {
                words.push(piece.to_string());
                last = encoded.word_alignment[pos];
            }
        }
        words
    }
}

/// Sums per-token weights into per-word weights. Positions without an
/// alignment (`[CLS]`, `[SEP]`, pads) are dropped.
pub fn aggregate_to_words(weights: &[f64], alignment: &[Option<usize>], num_words: usize) -> Vec<f64> {
    assert_eq!(weights.len(), alignment.len(), "one alignment per weight");
    let mut out = vec![0.0; num_words];
    for (w, a) in weights.iter().zip(alignment) {
        if let Some(word) = a {
            out[*word] += w;
        }
    }
    out
}
