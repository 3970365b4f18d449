//! Few-shot semantic segmentation by memory attention.
//!
//! Support images and their masks are encoded like annotated video frames,
//! concatenated into a memory bank, and a query image cross-attends to that
//! bank before a frozen mask decoder produces the segmentation. Adaptation to
//! the few-shot regime trains only low-rank adapters.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod mask;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autograd::{finite_difference_gradcheck, GradcheckReport, Gradients, Tape, Var};
pub use data::{Episode, EpisodeSource, FoldSpec, SyntheticConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalMode, EvalSpec, MetricsReport};
pub use lora::{Strategy, StrategyRanks};
pub use mask::BinaryMask;
pub use model::{Checkpoint, FsSam2, ModelConfig, SegmentationOutput};
pub use tensor::Tensor;
pub use train::{meta_train, pretrain_base, TrainConfig, TrainOutcome};
