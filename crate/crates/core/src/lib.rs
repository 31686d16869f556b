//! Relation extraction with pooling heads over a transformer encoder.
//!
//! A sentence with its candidate entity pair masked by tags (`@PROTEIN$`,
//! `@DRUG$`, ...) is tokenized, run through a BERT-style encoder, and
//! classified by one of seven heads: the `[CLS]` vector alone, or `[CLS]`
//! joined with an LSTM or attention summary of the last layer's content
//! tokens (or of every layer's `[CLS]` vector). Attention weights of the
//! word-level heads can be aggregated into trigger-word statistics and
//! heatmaps.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod record;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use corpus::{EntityType, LabelSet, RelationInstance};
pub use encoder::{EncoderConfig, EncoderParams, LastLayerStates};
pub use error::{Error, Result};
pub use heads::{HeadKind, HeadParams, HeadSpec};
pub use metrics::{ConfusionCounts, Prf};
pub use model::{Model, Prediction};
pub use record::AttentionRecord;
pub use tensor::Tensor;
pub use tokenizer::{EncodedSequence, Tokenizer, Vocabulary};
pub use trainer::{TrainConfig, TraceRow};
