//! Training and evaluation protocols: single-scale (vanilla), multi-scale
//! training of one branch (MST) and the multi-scale unified network.

mod ablation;
mod io;
mod probe;
mod run;
mod source;

pub use ablation::{ablation_grid, ablation_scales, AblationRow, ABLATION_HEADER};
pub use io::{load_checkpoint, save_checkpoint, Checkpoint};
pub use probe::{linear_probe, ProbeResult};
pub use run::{eval_multiscale, train, LogRow, TrainRun, LOG_HEADER};
pub use source::DataSource;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{BackboneSpec, ScaleSet};
use crate::optim::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Vanilla,
    Mst,
    Msun,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Vanilla => "vanilla",
            Method::Mst => "mst",
            Method::Msun => "msun",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "mst" => Ok(Method::Mst),
            "msun" => Ok(Method::Msun),
            _ => Err(Error::invalid(format!("unknown method `{s}` (vanilla|mst|msun)"))),
        }
    }
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub method: Method,
    pub backbone: BackboneSpec,
    pub train: TrainConfig,
    /// Backbone blocks per subnet (multi-scale unified network only).
    pub subnet_blocks: usize,
    pub eval_sizes: Vec<usize>,
    /// Batch assembly threads; 1 assembles inline.
    pub threads: usize,
}

impl ExperimentSpec {
    pub fn scale_set(&self) -> Result<ScaleSet> {
        ScaleSet::new(self.train.scales.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        let scales = self.scale_set()?;
        if scales.largest() != self.backbone.input_size {
            return Err(Error::invalid(format!(
                "largest scale {} must equal the model input size {}",
                scales.largest(),
                self.backbone.input_size
            )));
        }
        if self.method == Method::Msun && scales.len() < 2 {
            return Err(Error::invalid(format!(
                "msun needs at least two scales (S >= 2), got {:?}",
                scales.sizes()
            )));
        }
        if let Some(&s) = self.eval_sizes.iter().find(|&&s| s < 8) {
            return Err(Error::invalid(format!("evaluation size {s} is below the minimum of 8")));
        }
        if self.eval_sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("evaluation sizes must be sorted ascending"));
        }
        Ok(())
    }
}

/// Default sweep: 16 to 64 in steps of 8.
pub fn default_eval_sizes() -> Vec<usize> {
    (16..=64).step_by(8).collect()
}
