use crate::analysis::{collect_taps, FeatureMatrix, Tap};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::argmax;
use crate::nn::Linear;
use crate::optim::{sgd_step, OptimizerState};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::MsunModel;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Model parameter digests before and after probing.
    pub digest_before: [u8; 32],
    pub digest_after: [u8; 32],
}

const PROBE_LR: f64 = 0.05;
const PROBE_BATCH: usize = 64;

fn standardize(x: &FeatureMatrix, mean: &[f64], std: &[f64]) -> Vec<f32> {
    (0..x.n)
        .flat_map(|i| {
            x.row(i)
                .iter()
                .zip(mean.iter().zip(std))
                .map(|(v, (m, s))| ((v - m) / s) as f32)
                .collect::<Vec<_>>()
        })
        .collect()
}

fn predict(store: &ParamStore, head: &Linear, x: &[f32], n: usize, d: usize) -> Result<Vec<usize>> {
    let mut tape: Tape<f32> = Tape::inference();
    let v = tape.constant(Tensor::from_slice(&[n, d], x)?);
    let l = head.forward(&mut tape, store, v)?;
    let c = head.out_features;
    Ok(tape.data(l).chunks(c).map(argmax).collect())
}

/// Trains a fresh linear classifier on the model's frozen, pooled
/// unified-network features (standardized with training-set statistics)
/// and reports its accuracy. The model itself is only read.
pub fn linear_probe(
    model: &MsunModel,
    train_set: &Dataset,
    test: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if train_set.num_classes() != test.num_classes() {
        return Err(Error::invalid("probe train and test sets disagree on the class count"));
    }
    let digest_before = model.params.digest();
    let ftr = collect_taps(model, &train_set.images, &[Tap::Pool])?.remove(0);
    let fte = collect_taps(model, &test.images, &[Tap::Pool])?.remove(0);
    let d = ftr.d;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..ftr.n {
        for (m, v) in mean.iter_mut().zip(ftr.row(i)) {
            *m += v / ftr.n as f64;
        }
    }
    for i in 0..ftr.n {
        for ((s, v), m) in var.iter_mut().zip(ftr.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / ftr.n as f64;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
    let xtr = standardize(&ftr, &mean, &std);
    let xte = standardize(&fte, &mean, &std);

    let rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "probe", d, train_set.num_classes(), &mut rng.fork("init"));
    let mut opt = OptimizerState::new(&store);
    for epoch in 0..epochs {
        let order = rng.fork_index("epoch", epoch as u64).permutation(ftr.n);
        for chunk in order.chunks(PROBE_BATCH) {
            let xb: Vec<f32> = chunk.iter().flat_map(|&i| xtr[i * d..(i + 1) * d].to_vec()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            store.zero_grad();
            let mut tape: Tape<f32> = Tape::new();
            let v = tape.constant(Tensor::from_slice(&[chunk.len(), d], &xb)?);
            let logits = head.forward(&mut tape, &store, v)?;
            let loss = tape.softmax_cross_entropy(logits, &yb)?;
            tape.backward(loss)?;
            tape.write_param_grads(&mut store);
            sgd_step(&mut store, &mut opt, PROBE_LR, 0.9, 0.0)?;
        }
    }
    let acc = |x: &[f32], ds: &Dataset| -> Result<f64> {
        let p = predict(&store, &head, x, ds.len(), d)?;
        Ok(p.iter().zip(&ds.labels).filter(|(a, b)| a == b).count() as f64 / ds.len().max(1) as f64)
    };
    Ok(ProbeResult {
        train_accuracy: acc(&xtr, train_set)?,
        test_accuracy: acc(&xte, test)?,
        digest_before,
        digest_after: model.params.digest(),
    })
}
