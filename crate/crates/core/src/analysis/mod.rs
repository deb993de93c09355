//! Measurement tools: representation similarity, cost accounting,
//! accuracy reports, class activation maps and PCA projections.

mod cka;
mod eval;
mod features;
mod flops;
mod gradcam;
mod pca;

pub use cka::{center_features, cka, gram, layerwise_cka, layerwise_cka_pair, CkaRecord, CkaReport, CkaValue};
pub use eval::{accuracy, average_accuracy, EvalRecord, EvalReport};
pub use features::{collect_taps, default_taps, FeatureMatrix, Tap};
pub use flops::{count_flops, count_params, sequential_flops, FlopsRecord, FlopsReport};
pub use gradcam::{grad_cam, grad_cam_from_parts, read_pgm, write_pgm, GradCamMap, Pgm};
pub use pca::{pca_project, pca_csv, Projection};

/// Chunk size for eval-mode forward passes over probe and test sets.
pub(crate) const EVAL_CHUNK: usize = 128;
