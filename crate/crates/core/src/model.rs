//! Encoder plus head, bound together for training and prediction.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::corpus::{LabelSet, RelationInstance};
use crate::encoder::{self, derive_seed, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::heads::{argmax, head_forward, init_head, HeadOutput, HeadParams, HeadSpec, HeadVars};
use crate::record::AttentionRecord;
use crate::tensor::Tensor;
use crate::tokenizer::{EncodedSequence, Tokenizer};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams,
    pub head_spec: HeadSpec,
    pub head: HeadParams,
}

impl Model {
    /// Encoder weights are drawn from `encoder_config.seed`, head weights
    /// from a stream derived from it.
    pub fn init(encoder_config: EncoderConfig, head_spec: HeadSpec) -> Result<Self> {
        Self::init_with_std(encoder_config, head_spec, encoder::INIT_STD)
    }

    pub fn init_with_std(encoder_config: EncoderConfig, head_spec: HeadSpec, std: f64) -> Result<Self> {
        if head_spec.hidden != encoder_config.hidden_size {
            return Err(Error::Config(format!(
                "head width {} does not match encoder width {}",
                head_spec.hidden, encoder_config.hidden_size
            )));
        }
        let encoder = encoder::init_params_with_std(&encoder_config, std)?;
        let mut head = init_head(&head_spec, derive_seed(encoder_config.seed, &[0x4845_4144]))?;
        if std != encoder::INIT_STD {
            rescale(&mut head, std / encoder::INIT_STD);
        }
        Ok(Model {
            encoder_config,
            encoder,
            head_spec,
            head,
        })
    }

    /// Encoder tensors, then head tensors.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        out.extend(self.head.named());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, train_encoder: bool) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape, train_encoder),
            head: self.head.bind(tape),
        }
    }

    /// Head output for one encoded instance on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        encoded: &EncodedSequence,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadOutput> {
        let states = encoder::forward_on_tape(tape, &bound.encoder, &self.encoder_config, encoded, dropout)?;
        head_forward(tape, &self.head_spec, &bound.head, &states)
    }

    /// Mean cross-entropy over a batch, with gradients for every trainable
    /// tensor in [`Model::named`] order (zeros for frozen encoder tensors).
    pub fn batch_loss_and_grads(
        &self,
        batch: &[(&EncodedSequence, usize)],
        mut dropout: Option<&mut ChaCha8Rng>,
        train_encoder: bool,
    ) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, train_encoder);
        let mut losses = Vec::with_capacity(batch.len());
        let mut predicted = Vec::with_capacity(batch.len());
        for (encoded, gold) in batch {
            let out = self.forward_on_tape(&mut tape, &bound, encoded, dropout.as_deref_mut())?;
            predicted.push(argmax(tape.value(out.probs).data()));
            losses.push(tape.cross_entropy(out.probs, *gold)?);
        }
        let stacked = tape.concat_cols(&losses)?;
        let total = tape.sum(stacked);
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {loss_value}")));
        }
        let mut grads = tape.backward(loss)?;
        let grads = bound.collect(self, &mut grads);
        Ok(BatchResult {
            loss: loss_value,
            predicted,
            grads,
        })
    }

    /// Mean cross-entropy over a batch in evaluation mode, forward only.
    pub fn batch_loss(&self, batch: &[(&EncodedSequence, usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut total = 0.0;
        for (encoded, gold) in batch {
            let out = self.forward_on_tape(&mut tape, &bound, encoded, None)?;
            let loss = tape.cross_entropy(out.probs, *gold)?;
            total += tape.value(loss).data()[0];
        }
        Ok(total / batch.len() as f64)
    }

    /// Class probabilities and, for word-level attention heads, the token
    /// weights of one instance. Evaluation mode: no dropout.
    pub fn infer(&self, encoded: &EncodedSequence) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &bound, encoded, None)?;
        let probs = tape.value(out.probs).data().to_vec();
        let alpha = out
            .alpha
            .filter(|_| self.head_spec.kind.has_word_attention())
            .map(|a| tape.value(a).data().to_vec());
        Ok((probs, alpha))
    }
}

fn rescale(head: &mut HeadParams, factor: f64) {
    for t in head.tensors_mut() {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}

pub struct BoundModel {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl BoundModel {
    /// Every parameter var in [`Model::named`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.encoder.all();
        out.extend(self.head.all());
        out
    }

    fn collect(&self, model: &Model, grads: &mut Gradients) -> Vec<Tensor> {
        self.all()
            .into_iter()
            .zip(model.named())
            .map(|(v, (_, t))| grads.take(v).unwrap_or_else(|| t.zeros_like()))
            .collect()
    }
}

pub struct BatchResult {
    pub loss: f64,
    /// Arg-max class per instance under the training-mode forward pass.
    pub predicted: Vec<usize>,
    pub grads: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: String,
    pub label_index: usize,
    pub probs: Vec<f64>,
    pub record: Option<AttentionRecord>,
}

/// Predictions in input order. Attention records are attached for heads
/// whose weights fall on source words.
pub fn predict(
    model: &Model,
    tokenizer: &Tokenizer,
    labels: &LabelSet,
    instances: &[RelationInstance],
) -> Result<Vec<Prediction>> {
    if labels.len() != model.head_spec.num_classes {
        return Err(Error::Config(format!(
            "label set has {} classes but the head predicts {}",
            labels.len(),
            model.head_spec.num_classes
        )));
    }
    instances
        .iter()
        .map(|inst| {
            let encoded = tokenizer.encode(&inst.sentence, model.encoder_config.max_len)?;
            let (probs, alpha) = model.infer(&encoded)?;
            let label_index = argmax(&probs);
            let label = labels.label(label_index).to_string();
            let record = alpha
                .map(|a| AttentionRecord::from_tokens(&inst.id, &inst.label, &label, &encoded, a))
                .transpose()?;
            Ok(Prediction {
                id: inst.id.clone(),
                label,
                label_index,
                probs,
                record,
            })
        })
        .collect()
}
