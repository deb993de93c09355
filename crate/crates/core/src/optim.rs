//! SGD with momentum and a linear-warmup cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_floor_fraction: f64,
    pub lambda: f64,
    pub seed: u64,
    pub scales: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-5,
            batch_size: 32,
            epochs: 20,
            warmup_epochs: 5,
            lr_floor_fraction: 0.01,
            lambda: 0.1,
            seed: 0,
            scales: vec![16, 32, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("base_lr must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor_fraction) {
            return Err(Error::invalid("lr_floor_fraction must be in [0, 1]"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Velocity buffers, one per parameter in store order, created lazily at
/// the parameter's shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            velocity: store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[f32]> {
        self.velocity.get(index).map(Vec::as_slice)
    }
}

/// `v <- momentum * v + g + wd * p; p <- p - lr * v` for every trainable
/// parameter. A missing gradient counts as zero.
pub fn sgd_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != store.len() {
        *state = OptimizerState::new(store);
    }
    for (id, p) in store.iter() {
        if let Some(g) = p.tensor.grad() {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` at element {bad}", p.name)));
            }
        }
        if state.velocity[id.index()].len() != p.tensor.numel() {
            return Err(Error::ShapeMismatch {
                op: "sgd velocity",
                left: vec![state.velocity[id.index()].len()],
                right: p.tensor.shape().to_vec(),
            });
        }
    }
    for (id, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let vel = &mut state.velocity[id.index()];
        let grad = p.tensor.grad().map(<[f32]>::to_vec);
        let data = p.tensor.data_mut();
        for (k, (w, v)) in data.iter_mut().zip(vel.iter_mut()).enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[k] as f64);
            let nv = momentum * *v as f64 + g + weight_decay * *w as f64;
            *v = nv as f32;
            *w = (*w as f64 - lr * nv) as f32;
        }
    }
    Ok(())
}

/// Learning rate at optimizer step `step` of `total_steps`: a linear ramp
/// from `floor` to `base_lr` over the warmup steps, then cosine decay back
/// to `floor` on the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.base_lr;
    let floor = cfg.lr_floor_fraction * base;
    if total_steps <= 1 {
        return base;
    }
    let warm = warmup_steps(total_steps, cfg);
    if step < warm {
        return floor + (base - floor) * step as f64 / warm as f64;
    }
    let span = (total_steps - 1).saturating_sub(warm);
    if span == 0 {
        return base;
    }
    let t = ((step - warm) as f64 / span as f64).min(1.0);
    floor + 0.5 * (base - floor) * (1.0 + (PI * t).cos())
}

/// Warmup length in steps, proportional to the warmup epochs.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    let w = (total_steps as f64 * cfg.warmup_epochs as f64 / cfg.epochs.max(1) as f64).round() as usize;
    w.min(total_steps.saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f32, grad: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[1], value), true);
        s.get_mut(id).tensor.set_requires_grad(true);
        s.get_mut(id).tensor.accumulate_grad(&[grad]);
        s
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param() {
        let mut s = one_param(1.5, 0.0);
        let mut st = OptimizerState::new(&s);
        sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().1.tensor.data(), &[1.5]);
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut s = one_param(2.0, 0.75);
        let mut st = OptimizerState::new(&s);
        sgd_step(&mut s, &mut st, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().1.tensor.data(), &[1.25]);
    }

    #[test]
    fn momentum_recursion() {
        let g = 0.5f32;
        let mut s = one_param(0.0, g);
        let mut st = OptimizerState::new(&s);
        sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
        let v2 = st.velocity(0).unwrap()[0] as f64;
        assert!((v2 - 0.5 * 1.9).abs() < 1e-7);
        let p = s.iter().next().unwrap().1.tensor.data()[0] as f64;
        assert!((p + 0.1 * (0.5 + 0.95)).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = one_param(0.0, f32::NAN);
        let mut st = OptimizerState::new(&s);
        assert!(matches!(sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            ..Default::default()
        };
        let total = 101;
        let w = warmup_steps(total, &cfg);
        assert_eq!(w, 20);
        assert!((lr_at(0, total, &cfg) - 0.001).abs() < 1e-15);
        assert_eq!(lr_at(w, total, &cfg), 0.1);
        assert!((lr_at(total - 1, total, &cfg) - 0.001).abs() < 1e-9);
        let mid = w + (total - 1 - w) / 2;
        assert!((lr_at(mid, total, &cfg) - 0.0505).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            warmup_epochs: 30,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
