//! Multi-level contrastive learning for visual question answering with
//! natural-language explanations: data and chain-of-thought targets, a tiny
//! prefix-conditioned decoder, contrastive objectives, counterfactual mining,
//! metrics and the training harness.

pub mod annotation;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod objectives;
pub mod train;

pub use contrastive::{contrastive_loss, ClLevel, ContrastiveTriplet, ProjectionHead};
pub use data::{CotOrder, CotSequence, DatasetSplit, RawSample, TokenizedSample, Vocab};
pub use error::{Error, Result};
pub use metrics::{AnnotationResponse, EvalMode, HumanReport, MetricReport};
pub use mining::{AttributionScores, FactualSplit, MiningIndex};
pub use model::{Backbone, DecoderOutputs, EmbeddedSequence, ModelConfig, Precision, TinyTransformer};
pub use objectives::{LossBreakdown, LossWeights};
pub use train::{PredictionRecord, RunConfig, StepLog, Trainer};
