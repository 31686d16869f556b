//! Classification heads over encoder states.
//!
//! | kind            | pooled sequence                      | representation   |
//! |-----------------|--------------------------------------|------------------|
//! | `cls`           | none                                 | `h_CLS`          |
//! | `lstm_ll`       | last-layer content tokens, LSTM      | `[h_CLS; O]`     |
//! | `att_ll`        | last-layer content tokens, attention | `[h_CLS; O]`     |
//! | `lstm_ll_nocls` | last-layer content tokens, LSTM      | `O`              |
//! | `att_ll_nocls`  | last-layer content tokens, attention | `O`              |
//! | `lstm_cls`      | `[CLS]` of every layer, LSTM         | `[h_CLS; O]`     |
//! | `att_cls`       | `[CLS]` of every layer, attention    | `[h_CLS; O]`     |
//!
//! Attention pooling scores each vector by its inner product with a learned
//! vector `K`, softmax-normalises over content positions only (never
//! `[CLS]`, `[SEP]` or pads) and returns the weighted sum. LSTM pooling runs
//! a unidirectional LSTM from a zero state and returns its last hidden
//! output. The classifier is `softmax(W_f h + b_f)` with `W_f` sized
//! `C × D` for the representation width `D`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{content_mask, LastLayerStates, StateVars, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cls,
    LstmLl,
    AttLl,
    LstmLlNocls,
    AttLlNocls,
    LstmCls,
    AttCls,
}

impl HeadKind {
    pub const ALL: [HeadKind; 7] = [
        HeadKind::Cls,
        HeadKind::LstmLl,
        HeadKind::AttLl,
        HeadKind::LstmLlNocls,
        HeadKind::AttLlNocls,
        HeadKind::LstmCls,
        HeadKind::AttCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Cls => "cls",
            HeadKind::LstmLl => "lstm_ll",
            HeadKind::AttLl => "att_ll",
            HeadKind::LstmLlNocls => "lstm_ll_nocls",
            HeadKind::AttLlNocls => "att_ll_nocls",
            HeadKind::LstmCls => "lstm_cls",
            HeadKind::AttCls => "att_cls",
        }
    }

    /// Row label used in score reports.
    pub fn model_label(self) -> &'static str {
        match self {
            HeadKind::Cls => "BERT",
            HeadKind::LstmLl => "BERT+LSTM_LL",
            HeadKind::AttLl => "BERT+Att_LL",
            HeadKind::LstmLlNocls => "BERT+LSTM_LL*",
            HeadKind::AttLlNocls => "BERT+Att_LL*",
            HeadKind::LstmCls => "BERT+LSTM_CLS",
            HeadKind::AttCls => "BERT+Att_CLS",
        }
    }

    pub fn pooling(self) -> Option<Pooling> {
        match self {
            HeadKind::Cls => None,
            HeadKind::LstmLl | HeadKind::LstmLlNocls | HeadKind::LstmCls => Some(Pooling::Lstm),
            HeadKind::AttLl | HeadKind::AttLlNocls | HeadKind::AttCls => Some(Pooling::Attention),
        }
    }

    pub fn uses_cls(self) -> bool {
        !matches!(self, HeadKind::LstmLlNocls | HeadKind::AttLlNocls)
    }

    /// Pools over the `[CLS]` vectors of every layer instead of last-layer
    /// tokens.
    pub fn pools_layers(self) -> bool {
        matches!(self, HeadKind::LstmCls | HeadKind::AttCls)
    }

    /// Attention weights land on source words (last-layer attention kinds).
    pub fn has_word_attention(self) -> bool {
        matches!(self, HeadKind::AttLl | HeadKind::AttLlNocls)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = HeadKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown head {s:?}; valid heads: {}", valid.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Lstm,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub num_classes: usize,
    pub hidden: usize,
    pub lstm_hidden: usize,
}

impl HeadSpec {
    /// LSTM width defaults to the encoder width.
    pub fn new(kind: HeadKind, num_classes: usize, hidden: usize) -> Self {
        HeadSpec {
            kind,
            num_classes,
            hidden,
            lstm_hidden: hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("head hidden size must be positive".into()));
        }
        if self.kind.pooling() == Some(Pooling::Lstm) && self.lstm_hidden == 0 {
            return Err(Error::Config("lstm_hidden must be positive for LSTM heads".into()));
        }
        Ok(())
    }

    pub fn pool_dim(&self) -> usize {
        match self.kind.pooling() {
            None => 0,
            Some(Pooling::Attention) => self.hidden,
            Some(Pooling::Lstm) => self.lstm_hidden,
        }
    }

    /// Width `D` of the representation fed to the classifier.
    pub fn repr_dim(&self) -> usize {
        match self.kind {
            HeadKind::Cls => self.hidden,
            k if k.uses_cls() => self.hidden + self.pool_dim(),
            _ => self.pool_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Input weights `H × 4h`, gate blocks ordered input, forget, cell, output.
    pub w_input: Tensor,
    /// Recurrent weights `h × 4h`.
    pub w_hidden: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    pub fn hidden_size(&self) -> usize {
        self.w_hidden.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub k: Option<Tensor>,
    pub lstm: Option<LstmParams>,
    pub w_f: Tensor,
    pub b_f: Tensor,
}

pub fn init_head(spec: &HeadSpec, seed: u64) -> Result<HeadParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = spec.hidden;
    let k = (spec.kind.pooling() == Some(Pooling::Attention))
        .then(|| Tensor::truncated_normal([h], INIT_STD, &mut rng));
    let lstm = (spec.kind.pooling() == Some(Pooling::Lstm)).then(|| {
        let lh = spec.lstm_hidden;
        LstmParams {
            w_input: Tensor::truncated_normal([h, 4 * lh], INIT_STD, &mut rng),
            w_hidden: Tensor::truncated_normal([lh, 4 * lh], INIT_STD, &mut rng),
            bias: Tensor::zeros([4 * lh]),
        }
    });
    Ok(HeadParams {
        k,
        lstm,
        w_f: Tensor::truncated_normal([spec.num_classes, spec.repr_dim()], INIT_STD, &mut rng),
        b_f: Tensor::zeros([spec.num_classes]),
    })
}

impl HeadParams {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(k) = &self.k {
            out.push(("head.k".to_string(), k));
        }
        if let Some(l) = &self.lstm {
            out.push(("head.lstm.w_input".to_string(), &l.w_input));
            out.push(("head.lstm.w_hidden".to_string(), &l.w_hidden));
            out.push(("head.lstm.bias".to_string(), &l.bias));
        }
        out.push(("head.w_f".to_string(), &self.w_f));
        out.push(("head.b_f".to_string(), &self.b_f));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(k) = &mut self.k {
            out.push(k);
        }
        if let Some(l) = &mut self.lstm {
            out.extend([&mut l.w_input, &mut l.w_hidden, &mut l.bias]);
        }
        out.push(&mut self.w_f);
        out.push(&mut self.b_f);
        out
    }

    /// Rebuilds from named tensors, checking shapes against `spec`.
    pub fn from_named(spec: &HeadSpec, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut params = init_head(spec, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(expected) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(params)
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> HeadVars {
        HeadVars {
            k: self.k.as_ref().map(|k| tape.param(k, true)),
            lstm: self.lstm.as_ref().map(|l| LstmVars {
                w_input: tape.param(&l.w_input, true),
                w_hidden: tape.param(&l.w_hidden, true),
                bias: tape.param(&l.bias, true),
                hidden: l.hidden_size(),
            }),
            w_f: tape.param(&self.w_f, true),
            b_f: tape.param(&self.b_f, true),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

pub struct HeadVars {
    pub k: Option<Var>,
    pub lstm: Option<LstmVars>,
    pub w_f: Var,
    pub b_f: Var,
}

impl HeadVars {
    /// Same order as [`HeadParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.k.into_iter().collect();
        if let Some(l) = &self.lstm {
            out.extend([l.w_input, l.w_hidden, l.bias]);
        }
        out.extend([self.w_f, self.b_f]);
        out
    }
}

/// Additive attention over the rows of `x` (`T × H`) flagged in `valid`.
/// Returns the pooled `1 × H` vector and the `1 × T` weights.
pub fn attention_pool_on_tape(tape: &mut Tape<'_>, x: Var, k: Var, valid: &[bool]) -> Result<(Var, Var)> {
    let h = tape.value(k).numel();
    let k_col = tape.reshape(k, &[h, 1])?;
    let logits = tape.matmul(x, k_col)?;
    let t = tape.value(logits).numel();
    let logits = tape.reshape(logits, &[1, t])?;
    let alpha = tape.softmax(logits, Some(valid))?;
    let pooled = tape.matmul(alpha, x)?;
    Ok((pooled, alpha))
}

/// Runs the LSTM over rows `start..start + len` of `x`, returning the last
/// hidden output (`1 × h`).
pub fn lstm_pool_on_tape(tape: &mut Tape<'_>, x: Var, lstm: &LstmVars, start: usize, len: usize) -> Result<Var> {
    if len == 0 {
        return Err(Error::DegenerateSequence("LSTM over an empty sequence".into()));
    }
    let hs = lstm.hidden;
    let rows = tape.slice_rows(x, start, len)?;
    // Input contributions for every step at once.
    let projected = tape.matmul(rows, lstm.w_input)?;
    let projected = tape.add_bias(projected, lstm.bias)?;
    let mut hidden: Option<Var> = None;
    let mut cell: Option<Var> = None;
    for t in 0..len {
        let mut gates = tape.slice_rows(projected, t, 1)?;
        if let Some(h_prev) = hidden {
            let rec = tape.matmul(h_prev, lstm.w_hidden)?;
            gates = tape.add(gates, rec)?;
        }
        let i = tape.slice_cols(gates, 0, hs)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, hs, hs)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * hs, hs)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * hs, hs)?;
        let o = tape.sigmoid(o);
        let ig = tape.mul(i, g)?;
        let c = match cell {
            Some(c_prev) => {
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        hidden = Some(tape.mul(o, tc)?);
        cell = Some(c);
    }
    Ok(hidden.expect("len >= 1"))
}

/// Output of a head forward pass on a tape.
pub struct HeadOutput {
    pub logits: Var,
    pub probs: Var,
    /// Attention weights (`1 × T`) for attention kinds. For last-layer
    /// kinds `T` indexes token positions; for `att_cls` it indexes layers.
    pub alpha: Option<Var>,
}

/// Pooled vector `O` for the head kind (`None` for `cls`).
pub fn pool_on_tape(
    tape: &mut Tape<'_>,
    spec: &HeadSpec,
    vars: &HeadVars,
    states: &StateVars,
) -> Result<(Option<Var>, Option<Var>)> {
    let Some(pooling) = spec.kind.pooling() else {
        return Ok((None, None));
    };
    let (seq, valid, start, len) = if spec.kind.pools_layers() {
        if states.layers.is_empty() {
            return Err(Error::Config("intermediate [CLS] pooling needs at least one layer".into()));
        }
        let cls_rows = states
            .layers
            .iter()
            .map(|&l| tape.slice_rows(l, 0, 1))
            .collect::<Result<Vec<_>>>()?;
        let seq = tape.concat_rows(&cls_rows)?;
        let n = cls_rows.len();
        (seq, vec![true; n], 0, n)
    } else {
        let n = states.num_content;
        if n == 0 {
            return Err(Error::DegenerateSequence("no content tokens to pool".into()));
        }
        let rows = tape.value(states.last()).dims2()?.0;
        (states.last(), content_mask(rows, n, &states.mask), 1, n)
    };
    match pooling {
        Pooling::Attention => {
            let k = vars.k.ok_or_else(|| Error::Config("attention head without K".into()))?;
            let (o, alpha) = attention_pool_on_tape(tape, seq, k, &valid)?;
            Ok((Some(o), Some(alpha)))
        }
        Pooling::Lstm => {
            let lstm = vars.lstm.ok_or_else(|| Error::Config("LSTM head without LSTM weights".into()))?;
            Ok((Some(lstm_pool_on_tape(tape, seq, &lstm, start, len)?), None))
        }
    }
}

/// `h = h_CLS`, `[h_CLS; O]` or `O` depending on the kind.
pub fn assemble_on_tape(tape: &mut Tape<'_>, spec: &HeadSpec, cls: Var, pooled: Option<Var>) -> Result<Var> {
    let h = match (spec.kind, pooled) {
        (HeadKind::Cls, _) => cls,
        (k, Some(o)) if k.uses_cls() => tape.concat_cols(&[cls, o])?,
        (_, Some(o)) => o,
        (k, None) => return Err(Error::Config(format!("head {k} needs a pooled vector"))),
    };
    let width = tape.value(h).numel();
    if width != spec.repr_dim() {
        return Err(Error::shape(format!(
            "representation width {width} does not match declared D = {}",
            spec.repr_dim()
        )));
    }
    Ok(h)
}

/// `p = softmax(W_f h + b_f)`.
pub fn classify_on_tape(tape: &mut Tape<'_>, h: Var, w_f: Var, b_f: Var) -> Result<(Var, Var)> {
    let logits = tape.matmul_nt(h, w_f)?;
    let logits = tape.add_bias(logits, b_f)?;
    let probs = tape.softmax(logits, None)?;
    Ok((logits, probs))
}

/// Full head: pooling, assembly and classification.
pub fn head_forward(tape: &mut Tape<'_>, spec: &HeadSpec, vars: &HeadVars, states: &StateVars) -> Result<HeadOutput> {
    let (pooled, alpha) = pool_on_tape(tape, spec, vars, states)?;
    let cls = tape.slice_rows(states.last(), 0, 1)?;
    let h = assemble_on_tape(tape, spec, cls, pooled)?;
    let (logits, probs) = classify_on_tape(tape, h, vars.w_f, vars.b_f)?;
    Ok(HeadOutput { logits, probs, alpha })
}

/// Class probabilities for precomputed encoder states, plus the attention
/// weights for attention kinds.
pub fn head_probs(spec: &HeadSpec, params: &HeadParams, states: &LastLayerStates) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let sv = StateVars {
        embedding: tape.param(&states.embedding, false),
        layers: states.all_layers.iter().map(|l| tape.param(l, false)).collect(),
        mask: states.mask.clone(),
        num_content: states.num_content,
    };
    let out = head_forward(&mut tape, spec, &vars, &sv)?;
    let alpha = out.alpha.map(|a| tape.value(a).data().to_vec());
    Ok((tape.value(out.probs).data().to_vec(), alpha))
}

/// Attention pooling over the last layer's content tokens. Returns `O` and
/// the weights over every row of the state matrix (zero outside `1..=N`).
pub fn attention_pool(states: &LastLayerStates, k: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if states.num_content == 0 {
        return Err(Error::DegenerateSequence("no content tokens to pool".into()));
    }
    let mut tape = Tape::new();
    let x = tape.param(states.last(), false);
    let kv = tape.param(k, false);
    let (o, alpha) = attention_pool_on_tape(&mut tape, x, kv, &states.content_mask())?;
    Ok((tape.value(o).data().to_vec(), tape.value(alpha).data().to_vec()))
}

/// LSTM pooling over the last layer's content tokens.
pub fn lstm_pool(states: &LastLayerStates, lstm: &LstmParams) -> Result<Vec<f64>> {
    if states.num_content == 0 {
        return Err(Error::DegenerateSequence("no content tokens to pool".into()));
    }
    let mut tape = Tape::new();
    let x = tape.param(states.last(), false);
    let vars = LstmVars {
        w_input: tape.param(&lstm.w_input, false),
        w_hidden: tape.param(&lstm.w_hidden, false),
        bias: tape.param(&lstm.bias, false),
        hidden: lstm.hidden_size(),
    };
    let h = lstm_pool_on_tape(&mut tape, x, &vars, 1, states.num_content)?;
    Ok(tape.value(h).data().to_vec())
}

/// Pools the `[CLS]` vector of every layer, in layer order.
pub fn intermediate_cls_pool(states: &LastLayerStates, pooling: Pooling, params: &HeadParams) -> Result<Vec<f64>> {
    if states.all_layers.is_empty() {
        return Err(Error::Config("intermediate [CLS] pooling needs at least one layer".into()));
    }
    let rows: Vec<f64> = states.all_layers.iter().flat_map(|l| l.row(0).to_vec()).collect();
    let seq = Tensor::matrix(states.all_layers.len(), states.cls().len(), rows)?;
    let mut tape = Tape::new();
    let x = tape.leaf(seq, false);
    let n = states.all_layers.len();
    let out = match pooling {
        Pooling::Attention => {
            let k = params.k.as_ref().ok_or_else(|| Error::Config("missing K".into()))?;
            let kv = tape.param(k, false);
            attention_pool_on_tape(&mut tape, x, kv, &vec![true; n])?.0
        }
        Pooling::Lstm => {
            let l = params.lstm.as_ref().ok_or_else(|| Error::Config("missing LSTM weights".into()))?;
            let vars = LstmVars {
                w_input: tape.param(&l.w_input, false),
                w_hidden: tape.param(&l.w_hidden, false),
                bias: tape.param(&l.bias, false),
                hidden: l.hidden_size(),
            };
            lstm_pool_on_tape(&mut tape, x, &vars, 0, n)?
        }
    };
    Ok(tape.value(out).data().to_vec())
}

pub fn assemble(spec: &HeadSpec, cls: &[f64], pooled: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let c = tape.leaf(Tensor::matrix(1, cls.len(), cls.to_vec())?, false);
    let o = pooled
        .map(|o| Tensor::matrix(1, o.len(), o.to_vec()).map(|t| tape.leaf(t, false)))
        .transpose()?;
    let h = assemble_on_tape(&mut tape, spec, c, o)?;
    Ok(tape.value(h).data().to_vec())
}

pub fn classify(h: &[f64], w_f: &Tensor, b_f: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let hv = tape.leaf(Tensor::matrix(1, h.len(), h.to_vec())?, false);
    let w = tape.param(w_f, false);
    let b = tape.param(b_f, false);
    let (_, p) = classify_on_tape(&mut tape, hv, w, b)?;
    Ok(tape.value(p).data().to_vec())
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    fn states(rows: &[&[f64]], num_content: usize) -> LastLayerStates {
        let h = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.to_vec()).collect();
        let t = Tensor::matrix(rows.len(), h, data).unwrap();
        LastLayerStates {
            embedding: t.clone(),
            all_layers: vec![t],
            mask: vec![true; rows.len()],
            num_content,
        }
    }

    #[test]
    fn head_names_round_trip_and_reject_unknown() {
        for k in HeadKind::ALL {
            assert_eq!(k.name().parse::<HeadKind>().unwrap(), k);
        }
        let msg = "bert".parse::<HeadKind>().unwrap_err().to_string();
        for k in HeadKind::ALL {
            assert!(msg.contains(k.name()), "{msg}");
        }
    }

    #[test]
    fn repr_dims() {
        let d = |k| HeadSpec::new(k, 3, 4).repr_dim();
        assert_eq!(d(HeadKind::Cls), 4);
        assert_eq!(d(HeadKind::AttLl), 8);
        assert_eq!(d(HeadKind::LstmLl), 8);
        assert_eq!(d(HeadKind::AttLlNocls), 4);
        assert_eq!(d(HeadKind::AttCls), 8);
        let mut s = HeadSpec::new(HeadKind::LstmLlNocls, 3, 4);
        s.lstm_hidden = 6;
        assert_eq!(s.repr_dim(), 6);
        s.kind = HeadKind::LstmLl;
        assert_eq!(s.repr_dim(), 10);
        assert!(HeadSpec::new(HeadKind::Cls, 1, 4).validate().is_err());
    }

    #[test]
    fn zero_k_gives_uniform_weights_and_mean() {
        let s = states(&[&[9.0, 9.0], &[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0], &[1.0, 1.0], &[7.0, 7.0]], 4);
        let (o, alpha) = attention_pool(&s, &Tensor::zeros([2])).unwrap();
        assert_eq!(alpha[0], 0.0);
        assert_eq!(alpha[5], 0.0);
        for a in &alpha[1..5] {
            assert!((a - 0.25).abs() < 1e-15);
        }
        assert!((o[0] - 1.25).abs() < 1e-15 && (o[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_content_token() {
        let s = states(&[&[5.0, 5.0], &[0.3, -0.2], &[1.0, 1.0]], 1);
        let (o, alpha) = attention_pool(&s, &Tensor::vector(vec![3.0, -1.0]).unwrap()).unwrap();
        assert_eq!(alpha, vec![0.0, 1.0, 0.0]);
        assert_eq!(o, vec![0.3, -0.2]);
    }

    #[test]
    fn worked_attention_example() {
        let s = states(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]], 3);
        let (o, alpha) = attention_pool(&s, &Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        let expected = [0.2119415576170854, 0.2119415576170854, 0.5761168847658291];
        for (a, e) in alpha[1..4].iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        for v in o {
            assert!((v - 0.7880584423829146).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_content_is_degenerate() {
        let s = states(&[&[1.0], &[1.0]], 0);
        assert!(matches!(
            attention_pool(&s, &Tensor::zeros([1])),
            Err(Error::DegenerateSequence(_))
        ));
        let l = init_head(&HeadSpec::new(HeadKind::LstmLl, 2, 1), 0).unwrap().lstm.unwrap();
        assert!(matches!(lstm_pool(&s, &l), Err(Error::DegenerateSequence(_))));
    }

    #[test]
    fn large_k_concentrates_attention() {
        let s = states(&[&[0.0, 0.0], &[0.2, 0.1], &[0.5, -0.3], &[0.1, 0.4], &[0.0, 0.0]], 3);
        let k = Tensor::vector(vec![1e3, 0.0]).unwrap();
        let (_, alpha) = attention_pool(&s, &k).unwrap();
        assert!(alpha[2] > 0.999);
    }

    fn zero_lstm(input: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w_input: Tensor::zeros([input, 4 * hidden]),
            w_hidden: Tensor::zeros([hidden, 4 * hidden]),
            bias: Tensor::zeros([4 * hidden]),
        }
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let s = states(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5], &[0.0, 0.0]], 2);
        assert_eq!(lstm_pool(&s, &zero_lstm(2, 3)).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_step_lstm_is_one_cell() {
        let s = states(&[&[0.0], &[0.7], &[0.0]], 1);
        let l = LstmParams {
            w_input: Tensor::matrix(1, 4, vec![0.5, -0.3, 1.2, 0.8]).unwrap(),
            w_hidden: Tensor::zeros([1, 4]),
            bias: Tensor::vector(vec![0.1, 0.2, -0.1, 0.0]).unwrap(),
        };
        let x = 0.7;
        let i = sigmoid(0.5 * x + 0.1);
        let g = (1.2 * x - 0.1).tanh();
        let o = sigmoid(0.8 * x);
        let expected = o * (i * g).tanh();
        let out = lstm_pool(&s, &l).unwrap();
        assert!((out[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn intermediate_cls_pooling() {
        let layer = |v: f64| Tensor::matrix(2, 2, vec![v, -v, 9.0, 9.0]).unwrap();
        let one = LastLayerStates {
            embedding: layer(0.0),
            all_layers: vec![layer(1.5)],
            mask: vec![true; 2],
            num_content: 0,
        };
        let mut p = init_head(&HeadSpec::new(HeadKind::AttCls, 2, 2), 1).unwrap();
        assert_eq!(intermediate_cls_pool(&one, Pooling::Attention, &p).unwrap(), vec![1.5, -1.5]);

        let four = LastLayerStates {
            all_layers: vec![layer(1.0), layer(2.0), layer(3.0), layer(4.0)],
            ..one.clone()
        };
        p.k = Some(Tensor::zeros([2]));
        assert_eq!(intermediate_cls_pool(&four, Pooling::Attention, &p).unwrap(), vec![2.5, -2.5]);

        let mut lp = init_head(&HeadSpec::new(HeadKind::LstmCls, 2, 2), 1).unwrap();
        lp.lstm = Some(zero_lstm(2, 2));
        assert_eq!(intermediate_cls_pool(&four, Pooling::Lstm, &lp).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn assemble_variants() {
        let cls = [1.0, 2.0, 3.0, 4.0];
        let o = [5.0, 6.0, 7.0, 8.0];
        let spec = |k| HeadSpec::new(k, 2, 4);
        assert_eq!(assemble(&spec(HeadKind::Cls), &cls, None).unwrap(), cls);
        let h = assemble(&spec(HeadKind::AttLl), &cls, Some(&o)).unwrap();
        assert_eq!(h, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(assemble(&spec(HeadKind::AttLlNocls), &cls, Some(&o)).unwrap(), o);
        assert!(matches!(
            assemble(&spec(HeadKind::AttLl), &cls, Some(&o[..3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn classify_examples() {
        let h = [0.3, -0.7, 1.1];
        let p = classify(&h, &Tensor::zeros([5, 3]), &Tensor::zeros([5])).unwrap();
        for v in &p {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let p = classify(&h, &Tensor::zeros([2, 3]), &Tensor::vector(vec![10.0, -10.0]).unwrap()).unwrap();
        assert!((p[0] - 0.9999999979388463).abs() < 1e-15);
        assert!((p[1] - 2.0611536181902033e-09).abs() < 1e-20);

        let w = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.5, -0.1, 0.4]).unwrap();
        let p1 = classify(&h, &w, &Tensor::vector(vec![0.2, -0.4]).unwrap()).unwrap();
        let p2 = classify(&h, &w, &Tensor::vector(vec![5.2, 4.6]).unwrap()).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(classify(&h, &Tensor::zeros([2, 4]), &Tensor::zeros([2])).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn init_shapes_follow_spec() {
        let mut spec = HeadSpec::new(HeadKind::LstmLl, 3, 8);
        spec.lstm_hidden = 5;
        let p = init_head(&spec, 3).unwrap();
        let l = p.lstm.as_ref().unwrap();
        assert_eq!(l.w_input.shape(), &[8, 20]);
        assert_eq!(l.w_hidden.shape(), &[5, 20]);
        assert_eq!(p.w_f.shape(), &[3, 13]);
        assert!(p.k.is_none());
        let back = HeadParams::from_named(
            &spec,
            &p.named().into_iter().map(|(n, t)| (n, t.clone())).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(back, p);
    }
}
