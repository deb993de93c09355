use std::fmt;
use std::str::FromStr;

use super::EVAL_CHUNK;
use crate::error::{Error, Result};
use crate::model::MsunModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Samples-by-features matrix in row-major `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    /// Where the rows came from, e.g. `block2@16`.
    pub source: String,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if n < 2 || d == 0 {
            return Err(Error::invalid(format!("feature matrix needs n >= 2 and d >= 1, got {n}x{d}")));
        }
        if data.len() != n * d {
            return Err(Error::InvalidShape {
                op: "feature matrix",
                msg: format!("{} values for {n}x{d}", data.len()),
            });
        }
        let source = source.into();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature matrix {source} at element {i}")));
        }
        Ok(FeatureMatrix { n, d, data, source })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// A named activation inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tap {
    /// Output of global block `j` (block 0 is the stem).
    Block(usize),
    /// Globally pooled unified-network output.
    Pool,
    Logits,
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::Block(j) => write!(f, "block{j}"),
            Tap::Pool => f.write_str("pool"),
            Tap::Logits => f.write_str("logits"),
        }
    }
}

impl FromStr for Tap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(Tap::Pool),
            "logits" => Ok(Tap::Logits),
            _ => s
                .strip_prefix("block")
                .and_then(|j| j.parse().ok())
                .map(Tap::Block)
                .ok_or_else(|| Error::UnknownTap(s.to_string())),
        }
    }
}

impl Tap {
    pub fn check(&self, model: &MsunModel) -> Result<()> {
        match self {
            Tap::Block(j) if *j >= model.total_blocks() => Err(Error::UnknownTap(self.to_string())),
            _ => Ok(()),
        }
    }
}

/// Every block output, shallowest first.
pub fn default_taps(model: &MsunModel) -> Vec<Tap> {
    (0..model.total_blocks()).map(Tap::Block).collect()
}

/// Eval-mode activations at each tap, one flattened row per sample of the
/// square batch `x`, which is routed like any inference input.
pub fn collect_taps(model: &MsunModel, x: &Tensor<f32>, taps: &[Tap]) -> Result<Vec<FeatureMatrix>> {
    for t in taps {
        t.check(model)?;
    }
    let n = x.shape()[0];
    let per = x.numel() / n.max(1);
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); taps.len()];
    let mut dims = vec![0usize; taps.len()];
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_slice(&shape, &x.data()[start * per..end * per])?;
        let mut tape: Tape<f32> = Tape::inference();
        let v = tape.constant(chunk);
        let (out, _) = model.forward_infer(&mut tape, v)?;
        for (k, t) in taps.iter().enumerate() {
            let var = match t {
                Tap::Block(j) => out.blocks[*j],
                Tap::Pool => out.pooled,
                Tap::Logits => out.logits,
            };
            let val = tape.value(var);
            dims[k] = val.numel() / (end - start);
            rows[k].extend(val.data().iter().map(|&v| v as f64));
        }
        start = end;
    }
    let size = x.shape().get(2).copied().unwrap_or(0);
    taps.iter()
        .zip(rows)
        .zip(dims)
        .map(|((t, data), d)| FeatureMatrix::new(n, d, data, format!("{t}@{size}")))
        .collect()
}
