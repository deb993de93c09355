//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error. Exact-zero gradients are
/// measured against this instead of against round-off noise.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise `|a - n| / max(REL_FLOOR, |a| + |n|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements where both one-sided stencils cross a kink.
    pub skipped: usize,
}

/// Largest elementwise relative error between the tape gradient and a
/// finite-difference estimate. See [`grad_check_report`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_report(f, x, h).map(|r| r.max_rel_error)
}

/// Compares the tape gradient of a scalar function against finite
/// differences evaluated on `f64` tapes.
///
/// Central differences are used when `x - h`, `x` and `x + h` take the same
/// piecewise branches (ReLU signs, max-pool winners, active floors). When a
/// stencil point crosses a kink, a second-order one-sided stencil on the
/// unchanged side is used instead; if both sides cross, the element is
/// counted as skipped.
pub fn grad_check_report<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::<f64>::new().track_kinks();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let f0 = tape.value(y).item()?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    let sig0 = tape.kink_signature();
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut probe = x.clone();
    let mut eval_at = |i: usize, v: f64| -> Result<(f64, bool)> {
        let orig = probe.data()[i];
        probe.data_mut()[i] = v;
        let mut tp = Tape::<f64>::inference().track_kinks();
        let leaf = tp.leaf(probe.clone(), false);
        probe.data_mut()[i] = orig;
        let out = f(&mut tp, leaf)?;
        Ok((tp.value(out).item()?, tp.kink_signature() == sig0))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let (fp, same_p) = eval_at(i, x0 + h)?;
        let (fm, same_m) = eval_at(i, x0 - h)?;
        let numeric = if same_p && same_m {
            (fp - fm) / (2.0 * h)
        } else {
            let side = if same_m { Some(-1.0) } else if same_p { Some(1.0) } else { None };
            let far = match side {
                Some(s) => Some((s, eval_at(i, x0 + 2.0 * s * h)?)),
                None => None,
            };
            match far {
                Some((s, (f2, true))) => {
                    let f1 = if s > 0.0 { fp } else { fm };
                    s * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h)
                }
                _ => {
                    report.skipped += 1;
                    continue;
                }
            }
        };
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient element {i}")));
        }
        let err = (a - numeric).abs() / f64::max(REL_FLOOR, a.abs() + numeric.abs());
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
