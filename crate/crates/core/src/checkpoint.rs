//! Binary checkpoint: everything needed to rebuild a model and its
//! tokenizer.
//!
//! Layout (little endian):
//!
//! ```text
//! b"RELEXCKP"  u32 version  u64 meta_len  meta (JSON)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, u64 dims[rank], f64 data[numel]
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{HeadParams, HeadSpec};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, Vocabulary};
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"RELEXCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub head: HeadSpec,
    pub labels: LabelSet,
    pub vocab: Vec<String>,
    pub lowercase: bool,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, tokenizer: &Tokenizer, labels: LabelSet, train: Option<TrainConfig>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                encoder: model.encoder_config.clone(),
                head: model.head_spec.clone(),
                labels,
                vocab: tokenizer.vocab.tokens().to_vec(),
                lowercase: tokenizer.lowercase,
                train,
            },
            model,
        }
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let vocab = Vocabulary::from_tokens(self.meta.vocab.iter())?;
        Ok(Tokenizer::new(vocab).with_lowercase(self.meta.lowercase))
    }

    pub fn save(&self, mut out: impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(format!("encoding metadata: {e}")))?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        let named = self.model.named();
        out.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, t) in named {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(mut source: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        meta.encoder.validate()?;
        meta.head.validate()?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let head_names: Vec<(String, Tensor)> = tensors.iter().filter(|(n, _)| n.starts_with("head.")).cloned().collect();
        let encoder_tensors: Vec<(String, Tensor)> = tensors.into_iter().filter(|(n, _)| !n.starts_with("head.")).collect();
        let encoder = EncoderParams::from_named(&meta.encoder, encoder_tensors)?;
        let head = HeadParams::from_named(&meta.head, &head_names)?;
        let model = Model {
            encoder_config: meta.encoder.clone(),
            encoder,
            head_spec: meta.head.clone(),
            head,
        };
        Ok(Checkpoint { meta, model })
    }

    /// Loads and checks the stored encoder shape against `expected`.
    pub fn load_expecting(source: impl Read, expected: &EncoderConfig) -> Result<Self> {
        let ckpt = Self::load(source)?;
        ckpt.meta.encoder.check_matches(expected)?;
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
