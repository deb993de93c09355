use super::{train, ExperimentSpec, Method};
use crate::analysis::count_params;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{transform_to_msun, ScaleSet};
use crate::rng::Rng;

pub const ABLATION_HEADER: &str = "B,S,params,avg_acc,skip_reason";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub blocks: usize,
    pub scales: usize,
    pub params: Option<usize>,
    pub avg_acc: Option<f64>,
    pub skip_reason: Option<String>,
}

impl AblationRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.blocks,
            self.scales,
            self.params.map(|p| p.to_string()).unwrap_or_default(),
            self.avg_acc.map(|a| a.to_string()).unwrap_or_default(),
            self.skip_reason.as_deref().unwrap_or("").replace(',', ";")
        )
    }
}

/// `S` sizes halving down from `canonical`: `canonical / 2^(S-1), ..., canonical`.
pub fn ablation_scales(canonical: usize, s: usize) -> Result<ScaleSet> {
    if s == 0 || s > 16 {
        return Err(Error::invalid(format!("scale count {s} out of range")));
    }
    let sizes: Vec<usize> = (0..s).rev().map(|k| canonical >> k).collect();
    if sizes[0] < 8 {
        return Err(Error::invalid(format!("{s} halvings of {canonical} go below size 8")));
    }
    ScaleSet::new(sizes)
}

/// Trains one multi-scale model per `(B, S)` cell with the base spec's
/// seed and reports parameters and average accuracy over the base spec's
/// evaluation sizes. Infeasible cells get a reason instead of numbers.
pub fn ablation_grid<F>(
    base: &ExperimentSpec,
    b_list: &[usize],
    s_list: &[usize],
    train_set: &Dataset,
    mut test_at: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(usize) -> Result<Dataset>,
{
    if b_list.is_empty() || s_list.is_empty() {
        return Err(Error::invalid("ablation grid is empty"));
    }
    let mut rows = Vec::new();
    for &b in b_list {
        for &s in s_list {
            let skip = |reason: String| AblationRow {
                blocks: b,
                scales: s,
                params: None,
                avg_acc: None,
                skip_reason: Some(reason),
            };
            if s < 2 {
                rows.push(skip("needs at least two scales".into()));
                continue;
            }
            let scales = match ablation_scales(base.backbone.input_size, s) {
                Ok(sc) => sc,
                Err(e) => {
                    rows.push(skip(e.to_string()));
                    continue;
                }
            };
            let params = match transform_to_msun(&base.backbone, b, &scales, &mut Rng::new(0)) {
                Ok(m) => count_params(&m),
                Err(e) => {
                    rows.push(skip(e.to_string()));
                    continue;
                }
            };
            let mut spec = base.clone();
            spec.method = Method::Msun;
            spec.subnet_blocks = b;
            spec.train.scales = scales.sizes().to_vec();
            let run = train(&spec, train_set, None)?;
            let report = super::eval_multiscale(&run.model, &spec.eval_sizes, &mut test_at)?;
            rows.push(AblationRow {
                blocks: b,
                scales: s,
                params: Some(params),
                avg_acc: Some(report.average_accuracy()?),
                skip_reason: None,
            });
        }
    }
    Ok(rows)
}
