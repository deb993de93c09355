//! Multi-scale unified networks on a small CPU autograd engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`kernels`] and [`gradcheck`]: dense tensors and
//!   define-by-run reverse-mode differentiation.
//! * [`nn`]: convolution, pooling, batch norm, linear layers.
//! * [`model`]: backbones, the multi-scale subnet / unified network split,
//!   scale routing, the scale-invariant loss and the training step.
//! * [`optim`]: SGD with momentum and the warmup + cosine schedule.
//! * [`analysis`]: CKA, FLOPs/parameter accounting, accuracy reports,
//!   Grad-CAM and PCA.
//! * [`data`]: procedural shape datasets, IDX files and multi-scale batches.
//! * [`experiments`]: vanilla / multi-scale-training / MSUN protocols,
//!   multi-scale evaluation, linear probing and ablation grids.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use model::{BackboneSpec, BlockKind, LossBreakdown, MsunModel, ScaleSet};
pub use optim::{OptimizerState, TrainConfig};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Mode, Tape, Var};
pub use tensor::{Element, Tensor};
