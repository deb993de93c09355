//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node order is a valid
//! topological order, so [`Tape::backward`] walks the nodes once in reverse.
//! Parameters enter through [`Tape::param`], which copies the stored `f32`
//! values into the tape's element type and remembers the [`ParamId`] so the
//! gradients can be written back with [`Tape::write_param_grads`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore, StatUpdate};
use crate::tensor::{numel, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Neg { x: Var },
    Relu { x: Var },
    MatMul { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<E> },
    MaxPool { x: Var, argmax: Vec<u32> },
    GlobalAvgPool { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<E>, inv_std: Vec<f64>, train: bool },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Resize { x: Var },
    FloorAt { x: Var, floor: f64 },
}

impl<E: Element> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Sub, .. } => "sub",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Neg { .. } => "neg",
            Op::Relu { .. } => "relu",
            Op::MatMul { .. } => "matmul",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Resize { .. } => "bilinear_resize",
            Op::FloorAt { .. } => "floor_at",
        }
    }
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Whether a forward pass is a training pass (batch statistics, running
/// statistic updates) or an evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    record: bool,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
    kinks: Option<u64>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match s {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected a rank-4 [N,C,H,W] tensor, got {s:?}"),
        }),
    }
}

impl<E: Element> Tape<E> {
    /// A tape that records everything needed for `backward`.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
            kinks: None,
        }
    }

    /// A forward-only tape: no gradients are tracked and no intermediates
    /// are saved.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    /// Enables a running hash of every piecewise branch taken (ReLU signs,
    /// max-pool winners, active floors). Two evaluations with the same
    /// signature lie on the same smooth piece of the function.
    pub fn track_kinks(mut self) -> Self {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn mix_kinks(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(h) = self.kinks.as_mut() {
            for b in bits {
                *h = (*h ^ b).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.record,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Adds a constant or differentiable input.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        let mut value = value;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls for the same
    /// parameter return the same variable, so shared weights accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.cast(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// Makes later [`Tape::param`] calls for `id` return `v` instead of the
    /// stored value, e.g. to differentiate a model with respect to a
    /// perturbed copy of one parameter.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.param_vars.insert(id, v);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    // ----- elementwise -------------------------------------------------

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let out_shape = if sa == sb {
            sa.to_vec()
        } else if nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let n = numel(&out_shape);
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: E, y: E| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<E> = (0..n)
            .map(|i| f(da[if na == 1 { 0 } else { i }], db[if nb == 1 { 0 } else { i }]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = E::from_f64(factor);
        let v = self.value(x);
        let out: Vec<E> = v.data().iter().map(|&a| a * f).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| -a).collect());
        let rg = self.rg(x);
        self.push(t, Op::Neg { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .map(|&a| if a > E::ZERO { a } else { E::ZERO })
            .collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        if self.kinks.is_some() {
            let signs: Vec<u64> = self.data(x).iter().map(|&a| (a > E::ZERO) as u64).collect();
            self.mix_kinks(signs.into_iter());
        }
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    /// `max(x, floor)` for a scalar `x`; the gradient is zero whenever the
    /// floor is active (`x <= floor`).
    pub fn floor_at(&mut self, x: Var, floor: f64) -> Result<Var> {
        let v = self.value(x).item()?;
        let out = if v.to_f64() > floor { v } else { E::from_f64(floor) };
        self.mix_kinks(std::iter::once((v.to_f64() > floor) as u64));
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(out), Op::FloorAt { x, floor }, rg))
    }

    // ----- reductions and shape ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::sum_f64(self.data(x));
        let rg = self.rg(x);
        self.push(Tensor::scalar(E::from_f64(s)), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = kernels::sum_f64(d) / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(E::from_f64(s)), Op::Mean { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::InvalidShape {
                op: "flatten",
                msg: "cannot flatten a scalar".into(),
            });
        }
        self.reshape(x, &[s[0], numel(&s[1..])])
    }

    // ----- linear algebra ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (n, k, m) = match (sa.as_slice(), sb.as_slice()) {
            ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: sa,
                    right: sb,
                })
            }
        };
        let out = kernels::matmul(self.data(a), self.data(b), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul { a, b }, rg))
    }

    /// `x[N,in] · wᵀ + b` with `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let (n, inp, out) = match (sx.as_slice(), sw.as_slice()) {
            ([n, i], [o, i2]) if i == i2 => (*n, *i, *o),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    left: sx,
                    right: sw,
                })
            }
        };
        if sb != [out] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: vec![out],
                right: sb,
            });
        }
        let mut acc = vec![0.0; n * out];
        kernels::gemm_nt_acc(self.data(x), self.data(w), n, inp, out, &mut acc);
        let bias = self.data(b);
        for row in acc.chunks_mut(out) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv.to_f64();
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, out], kernels::to_elems(&acc)),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    // ----- convolutional layers ---------------------------------------

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [M,C,k,k]` plus `b: [M]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = shape4("conv2d", self.shape(x))?;
        let [m, c2, k, k2] = shape4("conv2d weight", self.shape(w))?;
        if c != c2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [m] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: vec![m],
                right: self.shape(b).to_vec(),
            });
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw().ok_or_else(|| Error::InvalidShape {
            op: "conv2d",
            msg: format!(
                "padded input {}x{} is smaller than the {k}x{k} kernel",
                h + 2 * pad,
                wd + 2 * pad
            ),
        })?;
        let rows = geom.col_rows();
        let p = oh * ow;
        let keep = self.record && self.rg(w);
        let mut saved = if keep { vec![E::ZERO; n * rows * p] } else { Vec::new() };
        let mut scratch = vec![E::ZERO; rows * p];
        let mut out = Vec::with_capacity(n * m * p);
        let mut acc = vec![0.0f64; m * p];
        let (xd, wdata, bd) = (self.data(x), self.data(w), self.data(b));
        for s in 0..n {
            let cols: &mut [E] = if keep {
                &mut saved[s * rows * p..(s + 1) * rows * p]
            } else {
                &mut scratch
            };
            kernels::im2col(&xd[s * c * h * wd..(s + 1) * c * h * wd], &geom, oh, ow, cols);
            for (i, row) in acc.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[i].to_f64());
            }
            kernels::gemm_nn_acc(wdata, cols, m, rows, p, &mut acc);
            out.extend(acc.iter().map(|&v| E::from_f64(v)));
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, m, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: saved,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = shape4("maxpool2d", self.shape(x))?;
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                msg: format!("window {window} (stride {stride}) does not fit a {h}x{w} input"),
            });
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let (out, argmax) =
            kernels::maxpool_forward(self.data(x), n * c, h, w, window, stride, oh, ow);
        self.mix_kinks(argmax.iter().map(|&i| i as u64));
        let rg = self.rg(x);
        let argmax = if self.record && rg { argmax } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let out = self
            .data(x)
            .chunks(hw)
            .map(|pl| E::from_f64(kernels::sum_f64(pl) / hw as f64))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { x }, rg))
    }

    /// Batch normalization over `[N,C,H,W]`.
    ///
    /// In [`Mode::Train`] the batch statistics normalize the input and a
    /// [`StatUpdate`] for the running statistics is queued on the tape. In
    /// [`Mode::Eval`] the running statistics are used as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&ParamStore, ParamId, ParamId),
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let [n, c, h, w] = shape4("batchnorm", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: vec![c],
                right: self.shape(gamma).to_vec(),
            });
        }
        let hw = h * w;
        let count = n * hw;
        let xd = self.data(x);
        let (store, mean_id, var_id) = running;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_i in 0..n {
                        s += kernels::sum_f64(&xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]);
                    }
                    let mu = s / count as f64;
                    let mut q = 0.0;
                    for s_i in 0..n {
                        for v in &xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw] {
                            let d = v.to_f64() - mu;
                            q += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / count as f64;
                }
                (mean, var)
            }
            Mode::Eval => (
                store.tensor(mean_id).data().iter().map(|&v| v as f64).collect(),
                store.tensor(var_id).data().iter().map(|&v| v as f64).collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = Vec::with_capacity(xd.len());
        let mut xhat = Vec::with_capacity(if self.record { xd.len() } else { 0 });
        for s_i in 0..n {
            for ch in 0..c {
                let plane = &xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw];
                let (mu, is, gv, bv) = (mean[ch], inv_std[ch], g[ch].to_f64(), b[ch].to_f64());
                for v in plane {
                    let xh = (v.to_f64() - mu) * is;
                    if self.record {
                        xhat.push(E::from_f64(xh));
                    }
                    out.push(E::from_f64(xh * gv + bv));
                }
            }
        }
        if mode == Mode::Train {
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            self.stat_updates.push(StatUpdate {
                mean: mean_id,
                var: var_id,
                batch_mean: mean,
                batch_var: var.iter().map(|v| v * unbias).collect(),
                momentum,
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Half-pixel bilinear resize of `[N,C,H,W]` to `[N,C,oh,ow]`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [n, c, h, w] = shape4("bilinear_resize", self.shape(x))?;
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidShape {
                op: "bilinear_resize",
                msg: format!("target size {oh}x{ow} must be positive"),
            });
        }
        let out = kernels::resize_forward(self.data(x), n * c, (h, w), (oh, ow));
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], out), Op::Resize { x }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match self.shape(logits) {
            [n, c] => (*n, *c),
            s => {
                return Err(Error::InvalidShape {
                    op: "softmax_cross_entropy",
                    msg: format!("expected [N,C] logits, got {s:?}"),
                })
            }
        };
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![n],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let ld = self.data(logits);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
            loss += -(row[l].to_f64() - max - z.ln());
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        let probs = if self.record && rg {
            kernels::softmax_rows(ld, n, c)
        } else {
            Vec::new()
        };
        Ok(self.push(
            Tensor::scalar(E::from_f64(loss)),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----- backward ---------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// depends on a differentiable leaf become available through
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![E::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the tape gradients of every parameter leaf into the store.
    /// Parameters that received no gradient are left untouched.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                let g32: Vec<f32> = g.iter().map(|x| x.to_f64() as f32).collect();
                store.get_mut(id).tensor.accumulate_grad(&g32);
            }
        }
    }

    /// Gradient of a parameter leaf, if it was used and reached.
    pub fn param_grad(&self, id: ParamId) -> Option<&[E]> {
        self.param_vars.get(&id).and_then(|&v| self.grad(v))
    }

    /// Describes the first node whose value contains a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| {
                format!(
                    "node {i} ({}{}) of shape {:?}",
                    n.op.name(),
                    n.param.map(|p| format!(", param #{}", p.index())).unwrap_or_default(),
                    n.value.shape()
                )
            })
        })
    }
}

fn add_into<E: Element>(grads: &mut [Option<Vec<E>>], v: Var, contribution: Vec<E>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot => *slot = Some(contribution),
    }
}

fn backprop_node<E: Element>(nodes: &[Node<E>], grads: &mut [Option<Vec<E>>], i: usize, g: &[E]) {
    let rg = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| nodes[v.0].value.data();
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let (na, nb) = (nodes[a.0].value.numel(), nodes[b.0].value.numel());
            let n = g.len();
            // Gradient w.r.t. one operand given the other's values.
            let side = |other: &[E], n_self: usize, n_other: usize, negate: bool| -> Vec<E> {
                let per: Vec<E> = (0..n)
                    .map(|j| {
                        let gj = if negate { -g[j] } else { g[j] };
                        match kind {
                            Binary::Mul => gj * other[if n_other == 1 { 0 } else { j }],
                            _ => gj,
                        }
                    })
                    .collect();
                if n_self == 1 && n > 1 {
                    vec![E::from_f64(kernels::sum_f64(&per))]
                } else {
                    per
                }
            };
            if rg(a) {
                add_into(grads, a, side(val(b), na, nb, false));
            }
            if rg(b) {
                add_into(grads, b, side(val(a), nb, na, *kind == Binary::Sub));
            }
        }
        Op::Scale { x, factor } => {
            if rg(*x) {
                let f = E::from_f64(*factor);
                add_into(grads, *x, g.iter().map(|&v| v * f).collect());
            }
        }
        Op::Neg { x } => {
            if rg(*x) {
                add_into(grads, *x, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Relu { x } => {
            if rg(*x) {
                let out = node.value.data();
                add_into(
                    grads,
                    *x,
                    g.iter()
                        .zip(out)
                        .map(|(&gv, &o)| if o > E::ZERO { gv } else { E::ZERO })
                        .collect(),
                );
            }
        }
        Op::FloorAt { x, floor } => {
            if rg(*x) {
                let active = nodes[x.0].value.data()[0].to_f64() > *floor;
                add_into(grads, *x, vec![if active { g[0] } else { E::ZERO }]);
            }
        }
        Op::Sum { x } => {
            if rg(*x) {
                add_into(grads, *x, vec![g[0]; nodes[x.0].value.numel()]);
            }
        }
        Op::Mean { x } => {
            if rg(*x) {
                let n = nodes[x.0].value.numel();
                let v = E::from_f64(g[0].to_f64() / n as f64);
                add_into(grads, *x, vec![v; n]);
            }
        }
        Op::Reshape { x } => {
            if rg(*x) {
                add_into(grads, *x, g.to_vec());
            }
        }
        Op::MatMul { a, b } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            if rg(*a) {
                let mut acc = vec![0.0; n * k];
                kernels::gemm_nt_acc(g, val(*b), n, m, k, &mut acc);
                add_into(grads, *a, kernels::to_elems(&acc));
            }
            if rg(*b) {
                let mut acc = vec![0.0; k * m];
                kernels::gemm_tn_acc(val(*a), g, n, k, m, &mut acc);
                add_into(grads, *b, kernels::to_elems(&acc));
            }
        }
        Op::Linear { x, w, b } => {
            let sx = nodes[x.0].value.shape();
            let (n, inp) = (sx[0], sx[1]);
            let out = nodes[w.0].value.shape()[0];
            if rg(*x) {
                let mut acc = vec![0.0; n * inp];
                kernels::gemm_nn_acc(g, val(*w), n, out, inp, &mut acc);
                add_into(grads, *x, kernels::to_elems(&acc));
            }
            if rg(*w) {
                let mut acc = vec![0.0; out * inp];
                kernels::gemm_tn_acc(g, val(*x), n, out, inp, &mut acc);
                add_into(grads, *w, kernels::to_elems(&acc));
            }
            if rg(*b) {
                let mut acc = vec![0.0; out];
                for row in g.chunks(out) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.to_f64();
                    }
                }
                add_into(grads, *b, kernels::to_elems(&acc));
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let s = node.value.shape();
            let (n, m, oh, ow) = (s[0], s[1], s[2], s[3]);
            let p = oh * ow;
            let rows = geom.col_rows();
            if rg(*b) {
                let mut acc = vec![0.0; m];
                for s_i in 0..n {
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += kernels::sum_f64(&g[(s_i * m + ch) * p..(s_i * m + ch + 1) * p]);
                    }
                }
                add_into(grads, *b, kernels::to_elems(&acc));
            }
            if rg(*w) {
                let mut acc = vec![0.0; m * rows];
                for s_i in 0..n {
                    kernels::gemm_nt_acc(
                        &g[s_i * m * p..(s_i + 1) * m * p],
                        &cols[s_i * rows * p..(s_i + 1) * rows * p],
                        m,
                        p,
                        rows,
                        &mut acc,
                    );
                }
                add_into(grads, *w, kernels::to_elems(&acc));
            }
            if rg(*x) {
                let plane = geom.channels * geom.height * geom.width;
                let mut dx = vec![0.0f64; n * plane];
                let mut dcols = vec![0.0f64; rows * p];
                for s_i in 0..n {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn_acc(
                        val(*w),
                        &g[s_i * m * p..(s_i + 1) * m * p],
                        m,
                        rows,
                        p,
                        &mut dcols,
                    );
                    kernels::col2im_add(
                        &dcols,
                        geom,
                        oh,
                        ow,
                        &mut dx[s_i * plane..(s_i + 1) * plane],
                    );
                }
                add_into(grads, *x, kernels::to_elems(&dx));
            }
        }
        Op::MaxPool { x, argmax } => {
            if rg(*x) {
                let mut dx = vec![E::ZERO; nodes[x.0].value.numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx as usize] += gv;
                }
                add_into(grads, *x, dx);
            }
        }
        Op::GlobalAvgPool { x } => {
            if rg(*x) {
                let s = nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(nodes[x.0].value.numel());
                for &gv in g {
                    let v = E::from_f64(gv.to_f64() / hw as f64);
                    dx.extend(std::iter::repeat(v).take(hw));
                }
                add_into(grads, *x, dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let s = node.value.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let count = (n * hw) as f64;
            let gam = val(*gamma);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s_i in 0..n {
                for ch in 0..c {
                    let off = (s_i * c + ch) * hw;
                    for j in off..off + hw {
                        let gv = g[j].to_f64();
                        dbeta[ch] += gv;
                        dgamma[ch] += gv * xhat[j].to_f64();
                    }
                }
            }
            if rg(*x) {
                let mut dx = Vec::with_capacity(g.len());
                for s_i in 0..n {
                    for ch in 0..c {
                        let off = (s_i * c + ch) * hw;
                        let gm = gam[ch].to_f64();
                        let is = inv_std[ch];
                        for j in off..off + hw {
                            let dxhat = g[j].to_f64() * gm;
                            let v = if *train {
                                // d/dx of (x - mean)/std with batch statistics.
                                is / count
                                    * (count * dxhat
                                        - dbeta[ch] * gm
                                        - xhat[j].to_f64() * dgamma[ch] * gm)
                            } else {
                                dxhat * is
                            };
                            dx.push(E::from_f64(v));
                        }
                    }
                }
                add_into(grads, *x, dx);
            }
            if rg(*gamma) {
                add_into(grads, *gamma, kernels::to_elems(&dgamma));
            }
            if rg(*beta) {
                add_into(grads, *beta, kernels::to_elems(&dbeta));
            }
        }
        Op::SoftmaxCe {
            logits,
            labels,
            probs,
        } => {
            if rg(*logits) {
                let c = nodes[logits.0].value.shape()[1];
                let n = labels.len();
                let scale = g[0].to_f64() / n as f64;
                let mut d: Vec<E> = Vec::with_capacity(n * c);
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let t = if j == l { 1.0 } else { 0.0 };
                        d.push(E::from_f64((probs[r * c + j] - t) * scale));
                    }
                }
                add_into(grads, *logits, d);
            }
        }
        Op::Resize { x } => {
            if rg(*x) {
                let si = nodes[x.0].value.shape();
                let so = node.value.shape();
                let dx = kernels::resize_backward(g, si[0] * si[1], (si[2], si[3]), (so[2], so[3]));
                add_into(grads, *x, dx);
            }
        }
    }
}
