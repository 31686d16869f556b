//! Post-layer-norm bidirectional transformer encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::EncodedSequence;

pub const INIT_STD: f64 = 0.02;
const SEGMENT_VOCAB: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// Small configuration for desk-scale runs: L=2, H=32, A=2, ffn=64.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 2,
            ffn_size: 64,
            vocab_size,
            max_len,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// BERT-base shape: L=12, H=768, A=12, ffn=3072.
    pub fn base(vocab_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            ..Self::desk(vocab_size, max_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Field-by-field comparison; the error names every differing value.
    pub fn check_matches(&self, expected: &EncoderConfig) -> Result<()> {
        let pairs = [
            ("num_layers", expected.num_layers, self.num_layers),
            ("hidden_size", expected.hidden_size, self.hidden_size),
            ("num_heads", expected.num_heads, self.num_heads),
            ("ffn_size", expected.ffn_size, self.ffn_size),
            ("vocab_size", expected.vocab_size, self.vocab_size),
            ("max_len", expected.max_len, self.max_len),
        ];
        let diffs: Vec<String> = pairs
            .iter()
            .filter(|(_, e, f)| e != f)
            .map(|(n, e, f)| format!("{n}: expected {e}, found {f}"))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("config mismatch ({})", diffs.join("; "))))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub attn_ln_gain: Tensor,
    pub attn_ln_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ffn_ln_gain: Tensor,
    pub ffn_ln_bias: Tensor,
}

impl LayerParams {
    const NAMES: [&'static str; 16] = [
        "wq",
        "bq",
        "wk",
        "bk",
        "wv",
        "bv",
        "wo",
        "bo",
        "attn_ln_gain",
        "attn_ln_bias",
        "w1",
        "b1",
        "w2",
        "b2",
        "ffn_ln_gain",
        "ffn_ln_bias",
    ];

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.attn_ln_gain,
            &self.attn_ln_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ffn_ln_gain,
            &self.ffn_ln_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.attn_ln_gain,
            &mut self.attn_ln_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ffn_ln_gain,
            &mut self.ffn_ln_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub segment_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embedding_ln_gain: Tensor,
    pub embedding_ln_bias: Tensor,
    pub layers: Vec<LayerParams>,
}

/// Truncated-normal weights (std 0.02), zero biases, unit layer-norm gains.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams> {
    init_params_with_std(config, INIT_STD)
}

pub fn init_params_with_std(config: &EncoderConfig, std: f64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.hidden_size;
    let f = config.ffn_size;
    let mut w = |rows: usize, cols: usize| Tensor::truncated_normal([rows, cols], std, &mut rng);
    let token_embedding = w(config.vocab_size, h);
    let segment_embedding = w(SEGMENT_VOCAB, h);
    let position_embedding = w(config.max_len, h);
    let layers = (0..config.num_layers)
        .map(|_| LayerParams {
            wq: w(h, h),
            bq: Tensor::zeros([h]),
            wk: w(h, h),
            bk: Tensor::zeros([h]),
            wv: w(h, h),
            bv: Tensor::zeros([h]),
            wo: w(h, h),
            bo: Tensor::zeros([h]),
            attn_ln_gain: Tensor::ones([h]),
            attn_ln_bias: Tensor::zeros([h]),
            w1: w(h, f),
            b1: Tensor::zeros([f]),
            w2: w(f, h),
            b2: Tensor::zeros([h]),
            ffn_ln_gain: Tensor::ones([h]),
            ffn_ln_bias: Tensor::zeros([h]),
        })
        .collect();
    Ok(EncoderParams {
        token_embedding,
        segment_embedding,
        position_embedding,
        embedding_ln_gain: Tensor::ones([h]),
        embedding_ln_bias: Tensor::zeros([h]),
        layers,
    })
}

impl EncoderParams {
    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embedding),
            ("embeddings.segment".to_string(), &self.segment_embedding),
            ("embeddings.position".to_string(), &self.position_embedding),
            ("embeddings.ln_gain".to_string(), &self.embedding_ln_gain),
            ("embeddings.ln_bias".to_string(), &self.embedding_ln_bias),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out
    }

    /// Same order as [`EncoderParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.segment_embedding,
            &mut self.position_embedding,
            &mut self.embedding_ln_gain,
            &mut self.embedding_ln_bias,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs, checking every shape
    /// against `config`.
    pub fn from_named(config: &EncoderConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = init_params(config)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} encoder tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(expected) {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> EncoderVars {
        let mut p = |t: &'p Tensor| tape.param(t, trainable);
        EncoderVars {
            token_embedding: p(&self.token_embedding),
            segment_embedding: p(&self.segment_embedding),
            position_embedding: p(&self.position_embedding),
            embedding_ln_gain: p(&self.embedding_ln_gain),
            embedding_ln_bias: p(&self.embedding_ln_bias),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    wq: p(&l.wq),
                    bq: p(&l.bq),
                    wk: p(&l.wk),
                    bk: p(&l.bk),
                    wv: p(&l.wv),
                    bv: p(&l.bv),
                    wo: p(&l.wo),
                    bo: p(&l.bo),
                    attn_ln_gain: p(&l.attn_ln_gain),
                    attn_ln_bias: p(&l.attn_ln_bias),
                    w1: p(&l.w1),
                    b1: p(&l.b1),
                    w2: p(&l.w2),
                    b2: p(&l.b2),
                    ffn_ln_gain: p(&l.ffn_ln_gain),
                    ffn_ln_bias: p(&l.ffn_ln_bias),
                })
                .collect(),
        }
    }
}

pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub attn_ln_gain: Var,
    pub attn_ln_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ffn_ln_gain: Var,
    pub ffn_ln_bias: Var,
}

/// Encoder parameters bound to a tape, in [`EncoderParams::named`] order.
pub struct EncoderVars {
    pub token_embedding: Var,
    pub segment_embedding: Var,
    pub position_embedding: Var,
    pub embedding_ln_gain: Var,
    pub embedding_ln_bias: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![
            self.token_embedding,
            self.segment_embedding,
            self.position_embedding,
            self.embedding_ln_gain,
            self.embedding_ln_bias,
        ];
        for l in &self.layers {
            out.extend([
                l.wq,
                l.bq,
                l.wk,
                l.bk,
                l.wv,
                l.bv,
                l.wo,
                l.bo,
                l.attn_ln_gain,
                l.attn_ln_bias,
                l.w1,
                l.b1,
                l.w2,
                l.b2,
                l.ffn_ln_gain,
                l.ffn_ln_bias,
            ]);
        }
        out
    }
}

/// Dropout source for training-mode forwards; `None` means eval mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Per-layer hidden states on a tape. Row `0` is `[CLS]`, rows `1..=N` are
/// content, row `N+1` is `[SEP]`.
pub struct StateVars {
    /// `layers[l]` is the output of block `l + 1`; the embedding output is
    /// `embedding`.
    pub embedding: Var,
    pub layers: Vec<Var>,
    pub mask: Vec<bool>,
    pub num_content: usize,
}

impl StateVars {
    pub fn last(&self) -> Var {
        *self.layers.last().unwrap_or(&self.embedding)
    }

    pub fn sep_index(&self) -> usize {
        self.num_content + 1
    }
}

/// Records the encoder forward pass. Only the valid prefix (`[CLS]`,
/// content, `[SEP]`) is computed: pads are masked out as attention keys, so
/// they never affect these positions.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    encoded: &EncodedSequence,
    mut dropout: DropoutRng<'_>,
) -> Result<StateVars> {
    if encoded.max_len() != config.max_len {
        return Err(Error::shape(format!(
            "encoded length {} does not match configured max_len {}",
            encoded.max_len(),
            config.max_len
        )));
    }
    let t = encoded.valid_len();
    let rate = config.dropout;
    let mut drop = |tape: &mut Tape<'_>, x: Var| match dropout.as_deref_mut() {
        Some(rng) => tape.dropout(x, rate, rng),
        None => x,
    };

    let tok = tape.embedding(vars.token_embedding, &encoded.ids[..t])?;
    let seg = tape.embedding(vars.segment_embedding, &encoded.segment_ids[..t])?;
    let pos = tape.embedding(vars.position_embedding, &encoded.position_ids[..t])?;
    let sum = tape.add(tok, seg)?;
    let sum = tape.add(sum, pos)?;
    let x = tape.layer_norm(sum, vars.embedding_ln_gain, vars.embedding_ln_bias)?;
    let embedding = drop(tape, x);

    let key_mask = &encoded.mask[..t];
    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut x = embedding;
    let mut layers = Vec::with_capacity(vars.layers.len());
    for lv in &vars.layers {
        let q = tape.matmul(x, lv.wq)?;
        let q = tape.add_bias(q, lv.bq)?;
        let k = tape.matmul(x, lv.wk)?;
        let k = tape.add_bias(k, lv.bk)?;
        let v = tape.matmul(x, lv.wv)?;
        let v = tape.add_bias(v, lv.bv)?;
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax(scores, Some(key_mask))?;
            let probs = drop(tape, probs);
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn = tape.matmul(ctx, lv.wo)?;
        let attn = tape.add_bias(attn, lv.bo)?;
        let attn = drop(tape, attn);
        let res = tape.add(x, attn)?;
        let x1 = tape.layer_norm(res, lv.attn_ln_gain, lv.attn_ln_bias)?;

        let hdn = tape.matmul(x1, lv.w1)?;
        let hdn = tape.add_bias(hdn, lv.b1)?;
        let hdn = tape.gelu(hdn);
        let out = tape.matmul(hdn, lv.w2)?;
        let out = tape.add_bias(out, lv.b2)?;
        let out = drop(tape, out);
        let res = tape.add(x1, out)?;
        x = tape.layer_norm(res, lv.ffn_ln_gain, lv.ffn_ln_bias)?;
        layers.push(x);
    }
    Ok(StateVars {
        embedding,
        layers,
        mask: key_mask.to_vec(),
        num_content: encoded.num_content,
    })
}

/// Hidden states of every layer for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerStates {
    /// Post-embedding states (`layer 0`).
    pub embedding: Tensor,
    /// `all_layers[l]` is the `T × H` output of block `l + 1`.
    pub all_layers: Vec<Tensor>,
    /// Validity per row of the state matrices.
    pub mask: Vec<bool>,
    pub num_content: usize,
}

impl LastLayerStates {
    pub fn cls_index(&self) -> usize {
        0
    }

    pub fn sep_index(&self) -> usize {
        self.num_content + 1
    }

    /// `h^L`: the last block's output (the embedding output when L = 0).
    pub fn last(&self) -> &Tensor {
        self.all_layers.last().unwrap_or(&self.embedding)
    }

    pub fn cls(&self) -> &[f64] {
        self.last().row(0)
    }

    /// Validity of content positions `1..=N` among all rows.
    pub fn content_mask(&self) -> Vec<bool> {
        content_mask(self.mask.len(), self.num_content, &self.mask)
    }
}

pub(crate) fn content_mask(rows: usize, num_content: usize, valid: &[bool]) -> Vec<bool> {
    (0..rows).map(|i| i >= 1 && i <= num_content && valid[i]).collect()
}

/// Plain (non-recording) forward pass.
pub fn forward(
    params: &EncoderParams,
    config: &EncoderConfig,
    encoded: &EncodedSequence,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<LastLayerStates> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let dropout = if train_mode { Some(&mut rng) } else { None };
    let states = forward_on_tape(&mut tape, &vars, config, encoded, dropout)?;
    Ok(LastLayerStates {
        embedding: tape.value(states.embedding).clone(),
        all_layers: states.layers.iter().map(|&v| tape.value(v).clone()).collect(),
        mask: states.mask,
        num_content: states.num_content,
    })
}

/// Seed for one dropout stream, mixed from a run seed and stream indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, GradCheck};
    use crate::tokenizer::{Tokenizer, Vocabulary};

    fn toy() -> (Tokenizer, EncoderConfig) {
        let v = crate::corpus::toy_vocabulary(["alpha beta gamma delta"], false);
        let mut cfg = EncoderConfig::desk(v.len(), 8);
        cfg.hidden_size = 8;
        cfg.ffn_size = 12;
        cfg.dropout = 0.1;
        (Tokenizer::new(v), cfg)
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::desk(10, 8);
        cfg.hidden_size = 8;
        assert_eq!(cfg.head_dim(), 4);
        cfg.hidden_size = 7;
        assert!(matches!(init_params(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded() {
        let (_, cfg) = toy();
        let a = init_params(&cfg).unwrap();
        assert_eq!(a, init_params(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(a, init_params(&other).unwrap());
        assert!(a.layers[0].attn_ln_gain.data().iter().all(|&g| g == 1.0));
        assert!(a.layers[0].bq.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_layers_returns_embedding_norm() {
        let (tok, mut cfg) = toy();
        cfg.num_layers = 0;
        let p = init_params(&cfg).unwrap();
        let e = tok.encode("alpha beta", 8).unwrap();
        let s = forward(&p, &cfg, &e, false, 0).unwrap();
        assert!(s.all_layers.is_empty());
        assert_eq!(s.last(), &s.embedding);
        // layer norm with unit gain: each row has zero mean, unit variance
        for r in 0..e.valid_len() {
            let row = s.last().row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn pad_region_does_not_leak() {
        let (tok, cfg) = toy();
        let p = init_params(&cfg).unwrap();
        let a = tok.encode("alpha beta", 8).unwrap();
        let mut b = a.clone();
        // garbage ids in the pad region
        for i in a.valid_len()..8 {
            b.ids[i] = 5 + i % 3;
        }
        let sa = forward(&p, &cfg, &a, false, 0).unwrap();
        let sb = forward(&p, &cfg, &b, false, 0).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn eval_is_pure_train_is_seeded() {
        let (tok, cfg) = toy();
        let p = init_params(&cfg).unwrap();
        let e = tok.encode("alpha beta gamma", 8).unwrap();
        assert_eq!(forward(&p, &cfg, &e, false, 1).unwrap(), forward(&p, &cfg, &e, false, 2).unwrap());
        let t1 = forward(&p, &cfg, &e, true, 1).unwrap();
        assert_eq!(t1, forward(&p, &cfg, &e, true, 1).unwrap());
        assert_ne!(t1, forward(&p, &cfg, &e, true, 2).unwrap());
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let (tok, cfg) = toy();
        let p = init_params(&cfg).unwrap();
        let e = tok.encode("alpha", 6).unwrap();
        assert!(matches!(forward(&p, &cfg, &e, false, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_output_projections_make_blocks_identity() {
        let (tok, cfg) = toy();
        let mut p = init_params(&cfg).unwrap();
        for l in &mut p.layers {
            l.wo = Tensor::zeros(l.wo.shape().to_vec());
            l.w2 = Tensor::zeros(l.w2.shape().to_vec());
        }
        let e = tok.encode("alpha beta gamma", 8).unwrap();
        let s = forward(&p, &cfg, &e, false, 0).unwrap();
        for layer in &s.all_layers {
            // Re-normalising adds an eps/var relative error, var being ~1e-3 here.
            assert!(layer.max_abs_diff(&s.embedding) < 1e-8);
        }
    }

    #[test]
    fn self_attention_rows_are_distributions() {
        let (tok, cfg) = toy();
        let p = init_params_with_std(&cfg, 0.5).unwrap();
        let e = tok.encode("alpha beta gamma", 8).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        forward_on_tape(&mut tape, &vars, &cfg, &e, None).unwrap();
        // scale -> softmax pairs: the node after each `scale` is a softmax
        let n = tape.len();
        let mut found = 0;
        for i in 0..n {
            let v = tape.value(crate::autodiff::Var::from_index(i));
            if v.shape() == [e.valid_len(), e.valid_len()] && v.data().iter().all(|&x| x >= 0.0) {
                let rows_ok = (0..e.valid_len()).all(|r| (v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                if rows_ok {
                    found += 1;
                }
            }
        }
        assert!(found >= cfg.num_layers * cfg.num_heads);
    }

    #[test]
    fn cls_gradient_matches_finite_differences() {
        let vocab = Vocabulary::from_tokens(
            crate::tokenizer::SPECIAL_TOKENS
                .iter()
                .chain(crate::tokenizer::ENTITY_TAGS.iter())
                .copied()
                .chain(["a", "b", "c", "d"]),
        )
        .unwrap();
        let tok = Tokenizer::new(vocab.clone());
        let cfg = EncoderConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 8,
            vocab_size: vocab.len(),
            max_len: 6,
            dropout: 0.0,
            seed: 4,
        };
        let params = init_params_with_std(&cfg, 0.4).unwrap();
        let e = tok.encode("a b c d", 6).unwrap();
        let weights: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let objective = |p: &EncoderParams, tape: &mut Tape, vars: &EncoderVars| {
            let s = forward_on_tape(tape, vars, &cfg, &e, None).unwrap();
            let cls = tape.slice_rows(s.last(), 0, 1).unwrap();
            let w = tape.constant(Tensor::matrix(1, 8, weights.clone()).unwrap());
            let y = tape.mul(cls, w).unwrap();
            let y = tape.tanh(y);
            let _ = p;
            tape.sum(y)
        };
        let analytic: Vec<Tensor> = {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, true);
            let loss = objective(&params, &mut tape, &vars);
            let g = tape.backward(loss).unwrap();
            vars.all()
                .iter()
                .zip(params.named())
                .map(|(&v, (_, t))| g.get_or_zeros(v, t))
                .collect()
        };
        let flat: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let f = |ts: &[Tensor]| {
            let mut p = params.clone();
            for (slot, t) in p.tensors_mut().into_iter().zip(ts) {
                *slot = t.clone();
            }
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, false);
            let out = objective(&p, &mut tape, &vars);
            tape.value(out).data()[0]
        };
        let report = finite_difference_check(f, &flat, &analytic, &GradCheck::default());
        assert!(report.passed(), "{report}");
    }
}
