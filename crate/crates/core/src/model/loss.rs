use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Per-step loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Cross-entropy of each branch, smallest scale first.
    pub ce: Vec<f64>,
    pub si: f64,
    pub lambda: f64,
    /// True when the scale-invariant term sat at or below `lambda` and so
    /// contributed the constant `lambda` with no gradient.
    pub clamped: bool,
}

impl LossBreakdown {
    pub fn ce_sum(&self) -> f64 {
        self.ce.iter().sum()
    }

    /// `max(si, lambda) + sum(ce)`, or just the CE sum for single-branch
    /// models which carry no scale-invariant term.
    pub fn recompute_total(&self, has_si: bool) -> f64 {
        if has_si {
            self.si.max(self.lambda) + self.ce_sum()
        } else {
            self.ce_sum()
        }
    }
}

/// Sum over unordered pairs of the mean squared difference between
/// feature maps. Fewer than two maps give a constant zero.
pub fn si_loss<E: Element>(tape: &mut Tape<E>, features: &[Var]) -> Result<Var> {
    if let Some(&first) = features.first() {
        for &f in &features[1..] {
            if tape.shape(f) != tape.shape(first) {
                return Err(Error::ShapeMismatch {
                    op: "si_loss",
                    left: tape.shape(first).to_vec(),
                    right: tape.shape(f).to_vec(),
                });
            }
        }
    }
    let mut acc: Option<Var> = None;
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let d = tape.sub(features[i], features[j])?;
            let sq = tape.mul(d, d)?;
            let m = tape.mean(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, m)?,
                None => m,
            });
        }
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(E::ZERO)),
    })
}

/// `max(si, lambda) + sum_i CE_i`. A `None` scale-invariant term (single
/// branch) leaves just the cross-entropy sum.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    logits: &[Var],
    labels: &[usize],
    si: Option<Var>,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("total_loss needs at least one branch"));
    }
    let mut ce = Vec::with_capacity(logits.len());
    let mut total: Option<Var> = None;
    for &l in logits {
        let c = tape.softmax_cross_entropy(l, labels)?;
        ce.push(tape.value(c).data()[0].to_f64());
        total = Some(match total {
            Some(t) => tape.add(t, c)?,
            None => c,
        });
    }
    let mut total = total.expect("at least one branch");
    let (si_val, clamped) = match si {
        Some(s) => {
            let v = tape.value(s).item()?.to_f64();
            let floored = tape.floor_at(s, lambda)?;
            total = tape.add(floored, total)?;
            (v, !(v > lambda))
        }
        None => (0.0, false),
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).data()[0].to_f64(),
        ce,
        si: si_val,
        lambda,
        clamped,
    };
    Ok((total, breakdown))
}
