//! Backbones, the multi-scale subnet / unified network transformation,
//! scale routing, the scale-invariant loss and the training step.

mod backbone;
mod loss;
mod msun;
mod train;

pub use backbone::{BackboneSpec, BlockDesc, BlockKind};
pub use loss::{si_loss, total_loss, LossBreakdown};
pub use msun::{build_vanilla, route_scale, transform_to_msun, BranchOutput, MsunModel, ScaleSet, Subnet};
pub use train::{argmax, training_step, StepOutcome, StepParams};
