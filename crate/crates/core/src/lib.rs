//! NeXtVLAD video classification: learnable VLAD aggregation with grouped
//! low-dimensional encoding, a two-stream classifier with squeeze-and-excitation
//! context gating, and on-the-fly knowledge distillation across a gated
//! mixture of experts. Includes a small reverse-mode autodiff engine, the
//! GAP@20 metric, dataset and checkpoint formats, and a trainer.

mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vlad;

pub use data::{Batch, Dataset, Eigenvalues, SyntheticSpec, VideoRecord};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossConfig};
pub use metrics::{gap_at_20, PredictionSet};
pub use model::{Aggregation, Model, ModelConfig, NetworkParams, NetworkStats};
pub use rng::SplitMix64;
pub use tensor::{DType, Scalar, Tape, Tensor, Var};
pub use train::{Checkpoint, TrainConfig, Trainer};
pub use vlad::{FrameBatchView, NeXtVladConfig, NetVladConfig};
