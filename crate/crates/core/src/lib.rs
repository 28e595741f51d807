//! Hierarchical layer-selective feedback distillation for dense binary
//! segmentation: a small reverse-mode tensor engine, teacher and student
//! networks with feature and predictive taps, the distillation losses, and
//! the training, data and evaluation machinery around them.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pnm;
pub mod report;
pub mod segv;
pub mod tensor;
pub mod train;

pub use error::{HlfdError, Result};
pub use graph::{Graph, OpKind, Var};
pub use tensor::Tensor;
