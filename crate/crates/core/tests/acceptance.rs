//! Acceptance suite. Each test checks one numbered criterion and prints a
//! single `criterion N: PASS|FAIL` line to stderr (visible without
//! `--nocapture`). Tests are serialized so that the timed criteria measure
//! their own work only.

use std::io::Write as _;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use msun_core::analysis::{
    cka, count_flops, count_params, default_taps, grad_cam, layerwise_cka_pair, read_pgm, sequential_flops,
    write_pgm, FeatureMatrix, FlopsReport,
};
use msun_core::data::{gen_shapes, load_idx, make_multiscale, write_idx, Dataset};
use msun_core::experiments::{
    default_eval_sizes, eval_multiscale, save_checkpoint, train, DataSource, ExperimentSpec, Method,
};
use msun_core::model::{
    build_vanilla, route_scale, si_loss, total_loss, training_step, transform_to_msun, StepParams,
};
use msun_core::nn::{Conv2d, Layer, Linear, Sequential};
use msun_core::{
    grad_check_report, BackboneSpec, BlockKind, Mode, MsunModel, OptimizerState, ParamStore, Result, Rng,
    ScaleSet, Tape, Tensor, TrainConfig, Var,
};
use nalgebra::DMatrix;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, title: &str, ok: bool, detail: &str) {
    let line = format!(
        "\ncriterion {n} ({title}): {} | {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{line}");
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).expect("shape matches data")
}

/// A shape with each dimension drawn from its inclusive range.
fn dims(rng: &mut Rng, ranges: &[(usize, usize)]) -> Vec<usize> {
    ranges.iter().map(|&(lo, hi)| range(rng, lo, hi)).collect()
}

fn range(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

// ---------------------------------------------------------------- 1 ----

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;

#[derive(Default)]
struct Tally {
    worst: f64,
    worst_at: String,
    checked: usize,
    skipped: usize,
    cases: usize,
}

impl Tally {
    fn add(&mut self, what: &str, r: msun_core::GradCheckReport) {
        self.cases += 1;
        self.checked += r.checked;
        self.skipped += r.skipped;
        if r.max_rel_error > self.worst || self.worst_at.is_empty() {
            self.worst = self.worst.max(r.max_rel_error);
            self.worst_at = what.to_string();
        }
    }
}

/// Reduces any output to a scalar with fixed random weights so that every
/// output element gets a distinct upstream gradient.
fn weighted_sum(t: &mut Tape<f64>, y: Var, salt: u64) -> Result<Var> {
    if t.value(y).numel() == 1 {
        return Ok(y);
    }
    let shape = t.shape(y).to_vec();
    let w = rand_tensor(&mut Rng::new(salt), &shape, -1.0, 1.0);
    let c = t.constant(w);
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

/// Checks `f` with respect to each of its inputs in turn.
fn check_inputs<F>(tally: &mut Tally, name: &str, inputs: &[Tensor<f64>], salt: u64, f: F) -> Result<()>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for k in 0..inputs.len() {
        let r = grad_check_report(
            |t, v| {
                let vars: Vec<Var> = (0..inputs.len())
                    .map(|j| if j == k { v } else { t.constant(inputs[j].clone()) })
                    .collect();
                let y = f(t, &vars)?;
                weighted_sum(t, y, salt)
            },
            &inputs[k],
            H,
        )?;
        tally.add(&format!("{name}[input {k}]"), r);
    }
    Ok(())
}

fn layer_checks(seed: u64, tally: &mut Tally) -> Result<()> {
    let mut rng = Rng::new(seed).fork("layers");
    let salt = seed;

    // convolution
    let (n, c, m) = (range(&mut rng, 1, 2), range(&mut rng, 1, 3), range(&mut rng, 1, 3));
    let (h, w) = (range(&mut rng, 3, 6), range(&mut rng, 3, 6));
    let k = range(&mut rng, 1, 3);
    let stride = range(&mut rng, 1, 2);
    let pad = rng.below(2);
    let ins = vec![
        rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0),
        rand_tensor(&mut rng, &[m, c, k, k], -1.0, 1.0),
        rand_tensor(&mut rng, &[m], -1.0, 1.0),
    ];
    check_inputs(tally, "conv2d", &ins, salt, |t, v| t.conv2d(v[0], v[1], v[2], stride, pad))?;

    // relu
    let ins = vec![rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)];
    check_inputs(tally, "relu", &ins, salt, |t, v| Ok(t.relu(v[0])))?;

    // max pooling
    let (window, pstride) = if rng.below(2) == 0 { (2, 2) } else { (3, range(&mut rng, 1, 2)) };
    let shape = dims(&mut rng, &[(1, 2), (1, 3), (3, 7), (3, 7)]);
    let ins = vec![rand_tensor(&mut rng, &shape, -1.0, 1.0)];
    check_inputs(tally, "maxpool2d", &ins, salt, |t, v| t.maxpool2d(v[0], window, pstride))?;

    // global average pooling
    let shape = dims(&mut rng, &[(2, 2), (3, 3), (1, 4), (1, 4)]);
    let ins = vec![rand_tensor(&mut rng, &shape, -1.0, 1.0)];
    check_inputs(tally, "global_avg_pool", &ins, salt, |t, v| t.global_avg_pool(v[0]))?;

    // batch norm, both modes
    let ch = range(&mut rng, 1, 3);
    let mut store = ParamStore::new();
    let rm = rand_tensor(&mut rng, &[ch], -0.5, 0.5).cast::<f32>();
    let rv = rand_tensor(&mut rng, &[ch], 0.5, 2.0).cast::<f32>();
    let mean_id = store.add("bn.running_mean", rm, false);
    let var_id = store.add("bn.running_var", rv, false);
    let shape = dims(&mut rng, &[(2, 3), (ch, ch), (1, 3), (3, 3)]);
    let ins = vec![
        rand_tensor(&mut rng, &shape, -1.0, 1.0),
        rand_tensor(&mut rng, &[ch], 0.5, 1.5),
        rand_tensor(&mut rng, &[ch], -0.5, 0.5),
    ];
    for (label, mode) in [("batch_norm(train)", Mode::Train), ("batch_norm(eval)", Mode::Eval)] {
        check_inputs(tally, label, &ins, salt, |t, v| {
            t.batch_norm(v[0], v[1], v[2], (&store, mean_id, var_id), mode, 0.1, 1e-5)
        })?;
    }

    // linear and matmul
    let (rows, fin, fout) = (range(&mut rng, 1, 4), range(&mut rng, 1, 5), range(&mut rng, 1, 4));
    let ins = vec![
        rand_tensor(&mut rng, &[rows, fin], -1.0, 1.0),
        rand_tensor(&mut rng, &[fout, fin], -1.0, 1.0),
        rand_tensor(&mut rng, &[fout], -1.0, 1.0),
    ];
    check_inputs(tally, "linear", &ins, salt, |t, v| t.linear(v[0], v[1], v[2]))?;
    let ins = vec![
        rand_tensor(&mut rng, &[rows, fin], -1.0, 1.0),
        rand_tensor(&mut rng, &[fin, fout], -1.0, 1.0),
    ];
    check_inputs(tally, "matmul", &ins, salt, |t, v| t.matmul(v[0], v[1]))?;

    // bilinear resize, up and down
    let (oh, ow) = (range(&mut rng, 1, 8), range(&mut rng, 1, 8));
    let shape = dims(&mut rng, &[(1, 2), (2, 2), (1, 6), (1, 6)]);
    let ins = vec![rand_tensor(&mut rng, &shape, -1.0, 1.0)];
    check_inputs(tally, "resize", &ins, salt, |t, v| t.resize(v[0], oh, ow))?;

    // softmax cross-entropy
    let (rows, classes) = (range(&mut rng, 1, 4), range(&mut rng, 2, 5));
    let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
    let ins = vec![rand_tensor(&mut rng, &[rows, classes], -3.0, 3.0)];
    check_inputs(tally, "softmax_cross_entropy", &ins, salt, |t, v| t.softmax_cross_entropy(v[0], &labels))?;

    // elementwise, reductions and reshapes
    let shape = [2, range(&mut rng, 1, 3), 2];
    let ins = vec![rand_tensor(&mut rng, &shape, -1.0, 1.0), rand_tensor(&mut rng, &shape, -1.0, 1.0)];
    check_inputs(tally, "add", &ins, salt, |t, v| t.add(v[0], v[1]))?;
    check_inputs(tally, "sub", &ins, salt, |t, v| t.sub(v[0], v[1]))?;
    check_inputs(tally, "mul", &ins, salt, |t, v| t.mul(v[0], v[1]))?;
    let ins_b = vec![ins[0].clone(), rand_tensor(&mut rng, &[], -1.0, 1.0)];
    check_inputs(tally, "mul(broadcast scalar)", &ins_b, salt, |t, v| t.mul(v[0], v[1]))?;
    let factor = rng.uniform_range(-2.0, 2.0);
    check_inputs(tally, "scale", &ins[..1], salt, |t, v| Ok(t.scale(v[0], factor)))?;
    check_inputs(tally, "neg", &ins[..1], salt, |t, v| Ok(t.neg(v[0])))?;
    check_inputs(tally, "mean", &ins[..1], salt, |t, v| Ok(t.mean(v[0])))?;
    check_inputs(tally, "sum", &ins[..1], salt, |t, v| Ok(t.sum(v[0])))?;
    check_inputs(tally, "flatten", &ins[..1], salt, |t, v| t.flatten(v[0]))?;

    // max(s, floor) on both sides of the floor
    for (label, floor) in [("floor_at(active)", -1.0), ("floor_at(clamped)", 1e3)] {
        check_inputs(tally, label, &ins[..1], salt, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq);
            t.floor_at(s, floor)
        })?;
    }

    // scale-invariant loss over three feature maps
    let fshape = [2, 2, 2, 2];
    let ins: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, &fshape, -1.0, 1.0)).collect();
    check_inputs(tally, "si_loss", &ins, salt, |t, v| si_loss(t, v))?;
    Ok(())
}

fn tiny_spec(kind: BlockKind) -> BackboneSpec {
    BackboneSpec {
        widths: vec![3, 4],
        blocks_per_stage: 1,
        block_kind: kind,
        num_classes: 3,
        input_size: 16,
        in_channels: 3,
        stem_kernel: 5,
        stem_stride: 2,
        stem_pool: true,
    }
}

/// The full training objective (per-scale CE plus the floored SI term)
/// differentiated with respect to every trainable parameter tensor.
fn model_checks(seed: u64, tally: &mut Tally) -> Result<()> {
    let mut rng = Rng::new(seed).fork("model");
    let kind = if seed % 2 == 0 { BlockKind::Plain } else { BlockKind::Residual };
    let blocks = 1 + (seed as usize / 2) % 2;
    let spec = tiny_spec(kind);
    let scales = ScaleSet::new(vec![8, 16])?;
    let model = transform_to_msun(&spec, blocks, &scales, &mut rng)?;
    let batch = 2;
    let images: Vec<Tensor<f64>> = scales
        .sizes()
        .iter()
        .map(|&r| rand_tensor(&mut rng, &[batch, 3, r, r], 0.0, 1.0))
        .collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(3)).collect();
    let ids: Vec<_> = model.params.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let x0 = model.params.tensor(id).cast::<f64>();
        let r = grad_check_report(
            |t, v| {
                t.bind_param(id, v);
                let inputs: Vec<Var> = images.iter().map(|x| t.constant(x.clone())).collect();
                let outs = model.forward_train(t, &inputs, Mode::Train)?;
                let feats: Vec<Var> = outs.iter().map(|o| o.features).collect();
                let logits: Vec<Var> = outs.iter().map(|o| o.logits).collect();
                let si = si_loss(t, &feats)?;
                Ok(total_loss(t, &logits, &labels, Some(si), 0.0)?.0)
            },
            &x0,
            H,
        )?;
        tally.add(&format!("model({kind}, B={blocks}).{name}"), r);
    }
    Ok(())
}

#[test]
fn criterion_01_gradient_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let seeds = 100u64;
    let mut layers = Tally::default();
    let mut model = Tally::default();
    let mut error = None;
    for seed in 0..seeds {
        if let Err(e) = layer_checks(seed, &mut layers).and_then(|_| model_checks(seed, &mut model)) {
            error = Some(format!("seed {seed}: {e}"));
            break;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let total = layers.checked + model.checked + layers.skipped + model.skipped;
    let skipped = layers.skipped + model.skipped;
    let ok = error.is_none()
        && layers.worst < GRAD_TOL
        && model.worst < GRAD_TOL
        && (skipped as f64) <= 0.01 * total as f64
        && secs < 120.0;
    verdict(
        1,
        "gradient correctness",
        ok,
        &format!(
            "{seeds} seeds; layers: {} cases, {} elements, max rel err {:.2e} at {}; model loss: {} tensors, {} elements, max rel err {:.2e} at {}; {} elements skipped at kinks; {:.1}s{}",
            layers.cases,
            layers.checked,
            layers.worst,
            layers.worst_at,
            model.cases,
            model.checked,
            model.worst,
            model.worst_at,
            skipped,
            secs,
            error.map(|e| format!("; error: {e}")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------- 2 ----

const ORACLE_TOL: f64 = 1e-5;

fn to_f32(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f32> {
    rand_tensor(rng, shape, lo, hi).cast::<f32>()
}

fn f64s(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle length mismatch");
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (n, c, h, wd): (usize, usize, usize, usize),
    m: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * m * oh * ow];
    for s in 0..n {
        for o in 0..m {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((s * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * m + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn naive_maxpool(x: &[f64], planes: usize, h: usize, w: usize, win: usize, stride: usize) -> Vec<f64> {
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let mut out = Vec::new();
    for p in 0..planes {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..win {
                    for dx in 0..win {
                        best = best.max(x[(p * h + y * stride + dy) * w + xo * stride + dx]);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Half-pixel bilinear sampling, written per output pixel.
fn naive_resize(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::new();
    for p in 0..planes {
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, h, oh);
            for xo in 0..ow {
                let (x0, x1, fx) = coord(xo, w, ow);
                let at = |yy: usize, xx: usize| x[(p * h + yy) * w + xx];
                out.push(
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1)),
                );
            }
        }
    }
    out
}

#[test]
fn criterion_02_oracle_equivalence() {
    let _g = serial();
    let shapes = 60;
    let mut rng = Rng::new(2024).fork("oracles");
    let mut worst = [0.0f64; 5];
    for _ in 0..shapes {
        // convolution
        let (n, c, m) = (range(&mut rng, 1, 3), range(&mut rng, 1, 4), range(&mut rng, 1, 5));
        let (h, w) = (range(&mut rng, 3, 12), range(&mut rng, 3, 12));
        let k = range(&mut rng, 1, 3.min(h).min(w));
        let (stride, pad) = (range(&mut rng, 1, 2), rng.below(2));
        let scale = 1.0 / ((c * k * k) as f64).sqrt();
        let x = to_f32(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let wt = to_f32(&mut rng, &[m, c, k, k], -scale, scale);
        let b = to_f32(&mut rng, &[m], -0.5, 0.5);
        let mut t = Tape::<f32>::inference();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
        let (want, oh, ow) = naive_conv(&f64s(&x), &f64s(&wt), &f64s(&b), (n, c, h, w), m, k, stride, pad);
        assert_eq!(t.shape(y), &[n, m, oh, ow]);
        worst[0] = worst[0].max(max_diff(t.data(y), &want));

        // max pooling
        let win = range(&mut rng, 1, 3.min(h).min(w));
        let ps = range(&mut rng, 1, 2);
        let y = t.maxpool2d(xv, win, ps).unwrap();
        worst[1] = worst[1].max(max_diff(t.data(y), &naive_maxpool(&f64s(&x), n * c, h, w, win, ps)));

        // softmax cross-entropy: value and gradient
        let (rows, classes) = (range(&mut rng, 1, 8), range(&mut rng, 2, 10));
        let logits = to_f32(&mut rng, &[rows, classes], -5.0, 5.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
        let mut gt = Tape::<f32>::new();
        let lv = gt.leaf(logits.clone(), true);
        let loss = gt.softmax_cross_entropy(lv, &labels).unwrap();
        gt.backward(loss).unwrap();
        let l64 = f64s(&logits);
        let mut want_loss = 0.0;
        let mut want_grad = vec![0.0; rows * classes];
        for r in 0..rows {
            let row = &l64[r * classes..(r + 1) * classes];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want_loss -= (row[labels[r]].exp() / z).ln() / rows as f64;
            for j in 0..classes {
                let p = row[j].exp() / z;
                want_grad[r * classes + j] = (p - (j == labels[r]) as u8 as f64) / rows as f64;
            }
        }
        worst[2] = worst[2].max(max_diff(gt.data(loss), &[want_loss]));
        worst[3] = worst[3].max(max_diff(gt.grad(lv).unwrap(), &want_grad));

        // bilinear resize
        let (oh, ow) = (range(&mut rng, 1, 20), range(&mut rng, 1, 20));
        let y = t.resize(xv, oh, ow).unwrap();
        worst[4] = worst[4].max(max_diff(t.data(y), &naive_resize(&f64s(&x), n * c, h, w, oh, ow)));
    }
    let ok = worst.iter().all(|&e| e <= ORACLE_TOL);
    verdict(
        2,
        "oracle equivalence",
        ok,
        &format!(
            "{shapes} random shapes each; max abs diff conv {:.1e}, maxpool {:.1e}, softmax-CE {:.1e} (grad {:.1e}), resize {:.1e}; tol {ORACLE_TOL:.0e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
}

// ---------------------------------------------------------------- 3 ----

fn features(n: usize, d: usize, data: Vec<f64>) -> FeatureMatrix {
    FeatureMatrix::new(n, d, data, "test").unwrap()
}

fn random_features(rng: &mut Rng, n: usize, d: usize) -> FeatureMatrix {
    features(n, d, (0..n * d).map(|_| rng.normal()).collect())
}

fn random_orthogonal(rng: &mut Rng, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.normal()).qr().q()
}

fn right_multiply(x: &FeatureMatrix, q: &DMatrix<f64>) -> FeatureMatrix {
    let m = DMatrix::from_row_slice(x.n, x.d, &x.data) * q;
    let mut data = Vec::with_capacity(x.n * x.d);
    for i in 0..x.n {
        for j in 0..x.d {
            data.push(m[(i, j)]);
        }
    }
    features(x.n, x.d, data)
}

/// Linear CKA by direct summation: uncentered Gram matrices, explicit
/// centering matrix H = I - 11'/n, HSIC as an elementwise double sum.
fn cka_direct(x: &FeatureMatrix, y: &FeatureMatrix) -> f64 {
    let n = x.n;
    let gram = |f: &FeatureMatrix| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| (0..f.d).map(|k| f.row(i)[k] * f.row(j)[k]).sum()).collect())
            .collect()
    };
    let hmat = |i: usize, j: usize| (i == j) as u8 as f64 - 1.0 / n as f64;
    let center = |k: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        s += hmat(i, a) * k[a][b] * hmat(b, j);
                    }
                }
                out[i][j] = s;
            }
        }
        out
    };
    let (kx, ky) = (center(&gram(x)), center(&gram(y)));
    let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += a[i][j] * b[i][j];
            }
        }
        s
    };
    hsic(&kx, &ky) / (hsic(&kx, &kx) * hsic(&ky, &ky)).sqrt()
}

#[test]
fn criterion_03_cka_properties() {
    let _g = serial();
    let pairs = 1000;
    let mut rng = Rng::new(33).fork("cka");
    let mut worst = [0.0f64; 5];
    let mut out_of_range = 0;
    for _ in 0..pairs {
        let n = range(&mut rng, 4, 16);
        let (dx, dy) = (range(&mut rng, 1, 8), range(&mut rng, 1, 8));
        let x = random_features(&mut rng, n, dx);
        let y = random_features(&mut rng, n, dy);
        let v = cka(&x, &y).unwrap().value;
        worst[0] = worst[0].max((cka(&x, &x).unwrap().value - 1.0).abs());
        worst[1] = worst[1].max((v - cka(&y, &x).unwrap().value).abs());
        if !(0.0..=1.0).contains(&v) {
            out_of_range += 1;
        }
        let q = random_orthogonal(&mut rng, dx);
        let c = rng.uniform_range(0.1, 10.0);
        let scaled = features(n, dx, x.data.iter().map(|a| a * c).collect());
        let rotated = right_multiply(&x, &q);
        worst[2] = worst[2].max((cka(&rotated, &y).unwrap().value - v).abs());
        worst[3] = worst[3].max((cka(&scaled, &y).unwrap().value - v).abs());
        worst[4] = worst[4].max((cka_direct(&x, &y) - v).abs());
    }
    let ok = worst[0] <= 1e-9
        && worst[1] <= 1e-12
        && out_of_range == 0
        && worst[2] <= 1e-9
        && worst[3] <= 1e-9
        && worst[4] <= 1e-10;
    verdict(
        3,
        "CKA properties",
        ok,
        &format!(
            "{pairs} random pairs; |cka(X,X)-1| {:.1e}; asymmetry {:.1e}; {out_of_range} outside [0,1]; orthogonal {:.1e}; scaling {:.1e}; direct-sum oracle {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
}

// ---------------------------------------------------------------- 4 ----

/// conv 3->8 k3 s1 p1 on 8x8, conv 8->16 k3 s2 p1, global pool, linear 16->4.
fn three_layer_fixture() -> (Sequential, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    let mut seq = Sequential::new("fixture");
    seq.push(Layer::Conv(Conv2d::new(&mut store, "conv1", 3, 8, 3, 1, 1, &mut rng)));
    seq.push(Layer::Relu);
    seq.push(Layer::Conv(Conv2d::new(&mut store, "conv2", 8, 16, 3, 2, 1, &mut rng)));
    seq.push(Layer::Relu);
    seq.push(Layer::GlobalAvgPool);
    seq.push(Layer::Linear(Linear::new(&mut store, "fc", 16, 4, &mut rng)));
    (seq, store)
}

#[test]
fn criterion_04_flops_and_params() {
    let _g = serial();
    let (seq, store) = three_layer_fixture();
    let rep: FlopsReport = sequential_flops(&seq, &[3, 8, 8]).unwrap();
    // Hand-audited: 2*n*m*k^2*H'*W' and 2*in*out.
    let expect_layers = [("conv1", 27_648u64), ("conv2", 36_864), ("fc", 128)];
    let got: Vec<(&str, u64)> = rep.layers.iter().map(|l| (l.name.as_str(), l.flops)).collect();
    let layers_ok = got == expect_layers && rep.total() == 64_640;
    let params_ok = store.num_trainable() == 224 + 1_168 + 68;

    let mut degenerate = Vec::new();
    for (widths, kind) in [
        (vec![8, 16, 32], BlockKind::Plain),
        (vec![4, 8], BlockKind::Residual),
        (vec![6, 6, 12, 12], BlockKind::Plain),
    ] {
        let spec = BackboneSpec {
            widths,
            block_kind: kind,
            ..BackboneSpec::default()
        };
        let vanilla = build_vanilla(&spec, &mut Rng::new(1)).unwrap();
        let scales = ScaleSet::new(vec![16, 32, 64]).unwrap();
        let b0 = transform_to_msun(&spec, 0, &scales, &mut Rng::new(2)).unwrap();
        degenerate.push((count_params(&vanilla), count_params(&b0)));
    }
    let degenerate_ok = degenerate.iter().all(|(a, b)| a == b);
    verdict(
        4,
        "FLOPs/params exactness",
        layers_ok && params_ok && degenerate_ok,
        &format!(
            "fixture layers {got:?} total {} (want 64640), params {}; B=0 vs vanilla params {degenerate:?}",
            rep.total(),
            store.num_trainable()
        ),
    );
}

// ---------------------------------------------------------------- 5 ----

fn brute_force_route(r: usize, sizes: &[usize]) -> usize {
    let dist: Vec<usize> = sizes.iter().map(|&s| r.abs_diff(s)).collect();
    let best = *dist.iter().min().unwrap();
    // Among equally near scales, the smaller size wins.
    let tied: Vec<usize> = (0..sizes.len()).filter(|&i| dist[i] == best).collect();
    *tied.iter().min_by_key(|&&i| sizes[i]).unwrap()
}

#[test]
fn criterion_05_routing_law() {
    let _g = serial();
    let mut sets: Vec<Vec<usize>> = vec![vec![16, 32, 64], vec![8, 16], vec![24, 48, 96, 192], vec![10, 11, 200], vec![64]];
    let mut rng = Rng::new(5).fork("routing");
    for _ in 0..200 {
        let k = range(&mut rng, 1, 5);
        let mut s: Vec<usize> = (0..k).map(|_| range(&mut rng, 8, 256)).collect();
        s.sort_unstable();
        s.dedup();
        sets.push(s);
    }
    let (mut checked, mut ties, mut mismatches) = (0, 0, Vec::new());
    for sizes in &sets {
        let set = ScaleSet::new(sizes.clone()).unwrap();
        for r in 8..=256 {
            let want = brute_force_route(r, sizes);
            let got = route_scale(r, &set);
            checked += 1;
            if sizes.iter().filter(|&&s| r.abs_diff(s) == r.abs_diff(sizes[want])).count() > 1 {
                ties += 1;
            }
            if got != want {
                mismatches.push((sizes.clone(), r, got, want));
            }
        }
    }
    let documented = route_scale(24, &ScaleSet::new(vec![16, 32]).unwrap()) == 0
        && route_scale(48, &ScaleSet::new(vec![32, 64]).unwrap()) == 0;
    verdict(
        5,
        "routing law",
        mismatches.is_empty() && ties > 0 && documented,
        &format!(
            "{} scale sets x sizes 8..256 = {checked} queries, {ties} ties, {} mismatches{}",
            sets.len(),
            mismatches.len(),
            mismatches.first().map(|m| format!(", first {m:?}")).unwrap_or_default()
        ),
    );
}

// ------------------------------------------------------------ 6 & 7 ----

const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_EPOCHS: usize = 6;
const DESK_WARMUP: usize = 1;

#[derive(Clone, Debug)]
struct SeedResult {
    vanilla_16: f64,
    vanilla_64: f64,
    vanilla_flops: f64,
    vanilla_cka: f64,
    mst_avg: f64,
    msun_16: f64,
    msun_64: f64,
    msun_avg: f64,
    msun_flops: f64,
    msun_cka: f64,
}

struct Desk {
    seeds: Vec<SeedResult>,
    secs: f64,
}

fn desk_spec(method: Method, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        method,
        backbone: BackboneSpec::default(),
        train: TrainConfig {
            epochs: DESK_EPOCHS,
            warmup_epochs: DESK_WARMUP,
            seed,
            scales: vec![16, 32, 64],
            ..TrainConfig::default()
        },
        subnet_blocks: 1,
        eval_sizes: default_eval_sizes(),
        threads: 1,
    }
}

fn desk_seed(seed: u64) -> Result<SeedResult> {
    let src = DataSource::Shapes {
        seed,
        classes: 6,
        n_train: 6000,
        n_test: 1200,
    };
    let (train_set, test) = src.load(64)?;
    let probe = test.subset(&(0..256).collect::<Vec<_>>());
    let (pa, pb) = (src.test_at(&probe, 16)?, src.test_at(&probe, 64)?);
    let mut out = Vec::new();
    for method in [Method::Vanilla, Method::Mst, Method::Msun] {
        let spec = desk_spec(method, seed);
        let run = train(&spec, &train_set, None)?;
        let rep = eval_multiscale(&run.model, &spec.eval_sizes, |s| src.test_at(&test, s))?;
        let taps = default_taps(&run.model);
        let last = *taps.last().expect("at least one block");
        let cka_rep = layerwise_cka_pair(&run.model, &pa.images, &pb.images, &[last])?;
        out.push((
            rep.accuracy_at(16).unwrap_or(f64::NAN),
            rep.accuracy_at(64).unwrap_or(f64::NAN),
            rep.average_accuracy()?,
            rep.mean_flops(),
            cka_rep.records[0].cka,
        ));
    }
    let (v, m, u) = (out[0], out[1], out[2]);
    Ok(SeedResult {
        vanilla_16: v.0,
        vanilla_64: v.1,
        vanilla_flops: v.3,
        vanilla_cka: v.4,
        mst_avg: m.2,
        msun_16: u.0,
        msun_64: u.1,
        msun_avg: u.2,
        msun_flops: u.3,
        msun_cka: u.4,
    })
}

fn desk() -> &'static std::result::Result<Desk, String> {
    static DESK: OnceLock<std::result::Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| {
        let t0 = Instant::now();
        let seeds = DESK_SEEDS
            .iter()
            .map(|&s| desk_seed(s).map_err(|e| format!("seed {s}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Desk {
            seeds,
            secs: t0.elapsed().as_secs_f64(),
        })
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn med(d: &Desk, f: impl Fn(&SeedResult) -> f64) -> f64 {
    median(d.seeds.iter().map(f).collect())
}

#[test]
fn criterion_06_desk_scale_trend() {
    let _g = serial();
    let d = match desk() {
        Ok(d) => d,
        Err(e) => return verdict(6, "desk-scale accuracy/FLOPs trend", false, e),
    };
    let (v16, u16_) = (med(d, |s| s.vanilla_16), med(d, |s| s.msun_16));
    let (v64, u64_) = (med(d, |s| s.vanilla_64), med(d, |s| s.msun_64));
    let (mst, msun) = (med(d, |s| s.mst_avg), med(d, |s| s.msun_avg));
    let (vf, uf) = (med(d, |s| s.vanilla_flops), med(d, |s| s.msun_flops));
    let a = u16_ - v16 >= 0.10;
    let b = (u64_ - v64).abs() <= 0.03;
    let c = msun >= mst;
    let dd = uf < vf;
    let time_ok = d.secs < 1200.0;
    verdict(
        6,
        "desk-scale accuracy/FLOPs trend",
        a && b && c && dd && time_ok,
        &format!(
            "medians over seeds {DESK_SEEDS:?}, {DESK_EPOCHS} epochs: (a) acc@16 msun {u16_:.4} vs vanilla {v16:.4} [{}]; (b) acc@64 msun {u64_:.4} vs vanilla {v64:.4} [{}]; (c) avg acc msun {msun:.4} vs mst {mst:.4} [{}]; (d) mean FLOPs msun {uf:.0} vs vanilla {vf:.0} [{}]; 9 runs in {:.0}s [{}]",
            pass(a),
            pass(b),
            pass(c),
            pass(dd),
            d.secs,
            pass(time_ok)
        ),
    );
}

fn pass(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

#[test]
fn criterion_07_cross_scale_cka() {
    let _g = serial();
    let d = match desk() {
        Ok(d) => d,
        Err(e) => return verdict(7, "cross-scale CKA", false, e),
    };
    let (v, u) = (med(d, |s| s.vanilla_cka), med(d, |s| s.msun_cka));
    let per_seed: Vec<String> = d
        .seeds
        .iter()
        .map(|s| format!("{:.3}/{:.3}", s.msun_cka, s.vanilla_cka))
        .collect();
    verdict(
        7,
        "cross-scale CKA",
        u > v,
        &format!("final-tap CKA(16 vs 64) median msun {u:.4} vs vanilla {v:.4}; per seed msun/vanilla {per_seed:?}"),
    );
}

// ---------------------------------------------------------------- 8 ----

/// Gradient of `max(si, lambda)` alone with respect to every trainable
/// parameter, from a train-mode forward whose statistics are discarded.
fn si_only_gradient(model: &MsunModel, images: &[Tensor<f32>], lambda: f64) -> Result<(f64, f64)> {
    let mut t = Tape::<f32>::new();
    let inputs: Vec<Var> = images.iter().map(|x| t.constant(x.clone())).collect();
    let outs = model.forward_train(&mut t, &inputs, Mode::Train)?;
    let feats: Vec<Var> = outs.iter().map(|o| o.features).collect();
    let si = si_loss(&mut t, &feats)?;
    let si_value = t.value(si).item()? as f64;
    let floored = t.floor_at(si, lambda)?;
    t.backward(floored)?;
    let mut max_abs = 0.0f64;
    for (id, p) in model.params.iter() {
        if p.trainable {
            if let Some(g) = t.param_grad(id) {
                max_abs = g.iter().fold(max_abs, |m, &v| m.max((v as f64).abs()));
            }
        }
    }
    Ok((si_value, max_abs))
}

fn clamp_model() -> (MsunModel, Dataset, ScaleSet) {
    let spec = BackboneSpec {
        widths: vec![4, 8],
        num_classes: 3,
        input_size: 32,
        ..BackboneSpec::default()
    };
    let scales = ScaleSet::new(vec![16, 32]).unwrap();
    let model = transform_to_msun(&spec, 1, &scales, &mut Rng::new(8)).unwrap();
    let ds = gen_shapes(8, 64, 3, 32).unwrap();
    (model, ds, scales)
}

#[test]
fn criterion_08_clamp_behaviour() {
    let _g = serial();
    let (mut model, ds, scales) = clamp_model();
    let mut opt = OptimizerState::new(&model.params);
    let hp = StepParams {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 2e-5,
        lambda: 1e3,
    };
    let (mut steps, mut worst_grad, mut max_si, mut all_clamped) = (0, 0.0f64, 0.0f64, true);
    for epoch in 0..3u64 {
        for batch in make_multiscale(&ds, &scales, 16, epoch) {
            let (si, g) = si_only_gradient(&model, &batch.images, hp.lambda).unwrap();
            worst_grad = worst_grad.max(g);
            max_si = max_si.max(si);
            let out = training_step(&mut model, &batch, &mut opt, hp).unwrap();
            all_clamped &= out.loss.clamped;
            steps += 1;
        }
    }
    let (fresh, _, _) = clamp_model();
    let first = make_multiscale(&ds, &scales, 16, 0).next().unwrap();
    let (si0, g0) = si_only_gradient(&fresh, &first.images, 0.0).unwrap();
    let ok = worst_grad == 0.0 && all_clamped && g0 > 0.0;
    verdict(
        8,
        "clamp behaviour",
        ok,
        &format!(
            "lambda=1e3: {steps} steps, max |SI grad| {worst_grad:e}, max SI {max_si:.4}, every step clamped: {all_clamped}; lambda=0 at init: SI {si0:.4}, max |SI grad| {g0:.3e}"
        ),
    );
}

// ---------------------------------------------------------------- 9 ----

fn pipeline(dir: &Path, seed: u64) -> Result<Vec<(String, Vec<u8>)>> {
    let train_set = gen_shapes(seed, 160, 3, 32)?;
    let test_set = gen_shapes(seed ^ 0x5eed, 48, 3, 32)?;
    let p = |n: &str| dir.join(n);
    write_idx(&train_set, &p("train-images.idx"), &p("train-labels.idx"))?;
    write_idx(&test_set, &p("test-images.idx"), &p("test-labels.idx"))?;
    let src = DataSource::Idx {
        train_images: p("train-images.idx"),
        train_labels: p("train-labels.idx"),
        test_images: p("test-images.idx"),
        test_labels: p("test-labels.idx"),
    };
    let (tr, te) = src.load(32)?;
    let spec = ExperimentSpec {
        method: Method::Msun,
        backbone: BackboneSpec {
            widths: vec![4, 8],
            num_classes: 3,
            input_size: 32,
            ..BackboneSpec::default()
        },
        train: TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 16,
            seed,
            scales: vec![16, 32],
            ..TrainConfig::default()
        },
        subnet_blocks: 1,
        eval_sizes: vec![16, 24, 32],
        threads: 1,
    };
    let run = train(&spec, &tr, Some(&te))?;
    save_checkpoint(&run.model, Method::Msun, &p("model.ckpt"))?;
    let eval = eval_multiscale(&run.model, &spec.eval_sizes, |s| src.test_at(&te, s))?;
    let (a, b) = (src.test_at(&te, 16)?, src.test_at(&te, 32)?);
    let cka_rep = layerwise_cka_pair(&run.model, &a.images, &b.images, &default_taps(&run.model))?;
    let mut files = Vec::new();
    for name in ["train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx", "model.ckpt"] {
        files.push((name.to_string(), std::fs::read(p(name)).map_err(|e| msun_core::Error::io(p(name), e))?));
    }
    files.push(("train_log.csv".into(), run.log_csv().into_bytes()));
    files.push(("eval.csv".into(), eval.to_csv()?.into_bytes()));
    files.push(("cka.csv".into(), cka_rep.to_csv().into_bytes()));
    Ok(files)
}

#[test]
fn criterion_09_determinism() {
    let _g = serial();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = pipeline(d1.path(), 99);
    let r2 = pipeline(d2.path(), 99);
    let (ok, detail) = match (r1, r2) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&str> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.0.as_str())
                .collect();
            let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
            (
                differing.is_empty() && a.len() == b.len(),
                format!("gen -> train msun -> eval -> cka twice with seed 99; artifacts {names:?}; differing {differing:?}"),
            )
        }
        (Err(e), _) | (_, Err(e)) => (false, format!("pipeline error: {e}")),
    };
    verdict(9, "determinism", ok, &detail);
}

// --------------------------------------------------------------- 10 ----

/// A CSV schema fixture: `header=...`, `row=...` and optional `last=...`
/// lines. Row specs list one type per column: `uint`, `unit` (a number in
/// [0,1]), `float`, `label` (non-empty token) or a literal.
struct CsvSchema {
    header: String,
    row: Vec<String>,
    last: Option<Vec<String>>,
}

fn load_schema(name: &str) -> CsvSchema {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut header = None;
    let mut row = None;
    let mut last = None;
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').expect("key=value");
        let cols = || v.split(',').map(str::to_string).collect::<Vec<_>>();
        match k {
            "header" => header = Some(v.to_string()),
            "row" => row = Some(cols()),
            "last" => last = Some(cols()),
            _ => panic!("unknown schema key {k}"),
        }
    }
    CsvSchema {
        header: header.expect("header"),
        row: row.expect("row"),
        last,
    }
}

fn cell_ok(ty: &str, cell: &str) -> bool {
    match ty {
        "uint" => cell.parse::<u64>().is_ok(),
        "float" => cell.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        "unit" => cell.parse::<f64>().map(|v| (0.0..=1.0).contains(&v)).unwrap_or(false),
        "label" => !cell.is_empty() && !cell.contains(char::is_whitespace),
        lit => cell == lit,
    }
}

fn validate_csv(schema: &CsvSchema, csv: &str) -> std::result::Result<usize, String> {
    let lines: Vec<&str> = csv.lines().collect();
    if lines.first() != Some(&schema.header.as_str()) {
        return Err(format!("header {:?} != {:?}", lines.first(), schema.header));
    }
    let body = &lines[1..];
    let (rows, last) = match &schema.last {
        Some(spec) => {
            let (l, rest) = body.split_last().ok_or("missing final row")?;
            (rest, Some((spec, *l)))
        }
        None => (body, None),
    };
    if rows.is_empty() {
        return Err("no data rows".into());
    }
    let check = |spec: &[String], line: &str| -> std::result::Result<(), String> {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != spec.len() || !spec.iter().zip(&cells).all(|(t, c)| cell_ok(t, c)) {
            return Err(format!("row {line:?} does not match {spec:?}"));
        }
        Ok(())
    };
    for r in rows {
        check(&schema.row, r)?;
    }
    if let Some((spec, l)) = last {
        check(spec, l)?;
    }
    Ok(rows.len())
}

fn validate_pgm(schema_name: &str, text: &str, w: usize, h: usize) -> std::result::Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(schema_name);
    let spec = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let get = |k: &str| {
        spec.lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .map(str::to_string)
            .ok_or(format!("schema lacks {k}"))
    };
    let magic = get("magic")?;
    let max: u32 = get("max_value")?.parse().map_err(|_| "bad max_value")?;
    if text.split_whitespace().next() != Some(magic.as_str()) {
        return Err(format!("magic is not {magic}"));
    }
    let pgm = read_pgm(text).map_err(|e| e.to_string())?;
    if (pgm.width, pgm.height) != (w, h) || pgm.max_value != max || pgm.pixels.len() != w * h {
        return Err(format!("pgm {}x{} max {} with {} pixels", pgm.width, pgm.height, pgm.max_value, pgm.pixels.len()));
    }
    if pgm.pixels.iter().any(|&p| p > max) {
        return Err("pixel above max".into());
    }
    Ok(())
}

#[test]
fn criterion_10_golden_interfaces() {
    let _g = serial();
    let (model, ds, _) = clamp_model();
    let mut problems = Vec::new();
    let mut notes = Vec::new();

    let test_at = |s: usize| Ok(ds.resized(s));
    let eval = eval_multiscale(&model, &[16, 24, 32], test_at).unwrap();
    match validate_csv(&load_schema("eval_report.schema"), &eval.to_csv().unwrap()) {
        Ok(n) => notes.push(format!("eval {n} rows")),
        Err(e) => problems.push(format!("eval: {e}")),
    }
    let (a, b) = (ds.resized(16), ds.resized(32));
    let cka_rep = layerwise_cka_pair(&model, &a.images, &b.images, &default_taps(&model)).unwrap();
    match validate_csv(&load_schema("cka_report.schema"), &cka_rep.to_csv()) {
        Ok(n) => notes.push(format!("cka {n} rows")),
        Err(e) => problems.push(format!("cka: {e}")),
    }
    let flops = count_flops(&model, 24).unwrap();
    match validate_csv(&load_schema("flops_report.schema"), &flops.to_csv()) {
        Ok(n) => notes.push(format!("flops {n} rows")),
        Err(e) => problems.push(format!("flops: {e}")),
    }
    let one = ds.subset(&[0]);
    let cam = grad_cam(&model, &one.images, one.labels[0]).unwrap();
    let pgm = write_pgm(&cam.map, cam.width, cam.height);
    match validate_pgm("gradcam.schema", &pgm, cam.width, cam.height) {
        Ok(()) => notes.push(format!("gradcam {}x{}", cam.width, cam.height)),
        Err(e) => problems.push(format!("gradcam: {e}")),
    }

    // IDX: write -> load -> write reproduces the bytes, and the loaded
    // pixels are exactly the quantized first channel.
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write_idx(&ds, &p("a-img"), &p("a-lab")).unwrap();
    let back = load_idx(&p("a-img"), &p("a-lab")).unwrap();
    write_idx(&back, &p("b-img"), &p("b-lab")).unwrap();
    let again = load_idx(&p("b-img"), &p("b-lab")).unwrap();
    let bytes_equal = std::fs::read(p("a-img")).unwrap() == std::fs::read(p("b-img")).unwrap()
        && std::fs::read(p("a-lab")).unwrap() == std::fs::read(p("b-lab")).unwrap();
    let plane = ds.native_size * ds.native_size;
    let quantized_equal = (0..ds.len()).all(|i| {
        ds.sample(i)[..plane]
            .iter()
            .zip(&back.sample(i)[..plane])
            .all(|(&o, &l)| ((o * 255.0).round().clamp(0.0, 255.0) / 255.0 - l).abs() == 0.0)
    });
    let idx_ok = bytes_equal && quantized_equal && back.labels == ds.labels && again == back;
    if idx_ok {
        notes.push(format!("idx round-trip {} samples", ds.len()));
    } else {
        problems.push(format!("idx: bytes {bytes_equal}, pixels {quantized_equal}"));
    }
    verdict(
        10,
        "golden interfaces",
        problems.is_empty(),
        &format!("{}{}", notes.join(", "), if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }),
    );
}
