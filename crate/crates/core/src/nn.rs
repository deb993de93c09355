//! CNN building blocks.
//!
//! Layers own [`ParamId`]s into a [`ParamStore`] and run their forward pass
//! on a [`Tape`]; the backward rules live on the tape operations. Parameter
//! names follow `<layer-path>.weight`, `.bias`, `.gamma`, `.beta`,
//! `.running_mean` and `.running_var`.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let name = name.into();
        let fan_in = in_channels * kernel * kernel;
        let w = normal_tensor(
            &[out_channels, in_channels, kernel, kernel],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true);
        Conv2d {
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |l| crate::kernels::ConvGeom::out_len(l, self.kernel, self.stride, self.pad);
        Some((f(h)?, f(w)?))
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, store: &ParamStore, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: vec![self.in_channels],
                right: tape.shape(x).to_vec(),
            });
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false);
        let running_var = store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false);
        BatchNorm2d {
            name,
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(
            x,
            g,
            b,
            (store, self.running_mean, self.running_var),
            mode,
            self.momentum,
            self.eps,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Fan-in scaled normal weights (`std = sqrt(1 / fan_in)`), zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        rng: &mut Rng,
    ) -> Self {
        let name = name.into();
        let w = normal_tensor(&[out_features, in_features], (1.0 / in_features as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true);
        Linear {
            name,
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

/// `relu(body(x) + shortcut(x))`; an absent shortcut is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub body: Sequential,
    pub shortcut: Option<Sequential>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Linear(Linear),
    Residual(Residual),
}

impl Layer {
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        match self {
            Layer::Conv(c) => c.forward(tape, store, x),
            Layer::BatchNorm(b) => b.forward(tape, store, x, mode),
            Layer::Relu => Ok(tape.relu(x)),
            Layer::MaxPool { window, stride } => tape.maxpool2d(x, *window, *stride),
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Linear(l) => l.forward(tape, store, x),
            Layer::Residual(r) => {
                let y = r.body.forward(tape, store, x, mode)?;
                let s = match &r.shortcut {
                    Some(sc) => sc.forward(tape, store, x, mode)?,
                    None => x,
                };
                let sum = tape.add(y, s)?;
                Ok(tape.relu(sum))
            }
        }
    }

    /// Per-sample output shape (`[C,H,W]` or `[F]`) for a per-sample input.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let chw = |op: &'static str| -> Result<(usize, usize, usize)> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(Error::InvalidShape {
                    op,
                    msg: format!("expected [C,H,W], got {input:?}"),
                }),
            }
        };
        match self {
            Layer::Conv(cv) => {
                let (c, h, w) = chw("conv2d")?;
                if c != cv.in_channels {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d channels",
                        left: vec![cv.in_channels],
                        right: input.to_vec(),
                    });
                }
                let (oh, ow) = cv.out_hw(h, w).ok_or_else(|| Error::InvalidShape {
                    op: "conv2d",
                    msg: format!("kernel {} does not fit {h}x{w}", cv.kernel),
                })?;
                Ok(vec![cv.out_channels, oh, ow])
            }
            Layer::BatchNorm(_) | Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { window, stride } => {
                let (c, h, w) = chw("maxpool2d")?;
                if *window > h || *window > w {
                    return Err(Error::InvalidShape {
                        op: "maxpool2d",
                        msg: format!("window {window} larger than {h}x{w}"),
                    });
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            Layer::GlobalAvgPool => {
                let (c, _, _) = chw("global_avg_pool")?;
                Ok(vec![c])
            }
            Layer::Linear(l) => match input {
                [f] if *f == l.in_features => Ok(vec![l.out_features]),
                _ => Err(Error::ShapeMismatch {
                    op: "linear",
                    left: vec![l.in_features],
                    right: input.to_vec(),
                }),
            },
            Layer::Residual(r) => {
                let out = r.body.out_shape(input)?;
                let short = match &r.shortcut {
                    Some(s) => s.out_shape(input)?,
                    None => input.to_vec(),
                };
                if out != short {
                    return Err(Error::ShapeMismatch {
                        op: "residual",
                        left: out,
                        right: short,
                    });
                }
                Ok(out)
            }
        }
    }
}

/// Named chain of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(name: impl Into<String>) -> Self {
        Sequential {
            name: name.into(),
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, store, h, mode)?;
        }
        Ok(h)
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l.out_shape(&s)?;
        }
        Ok(s)
    }

    /// Parameter ids of every layer, in construction order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            collect_ids(l, &mut ids);
        }
        ids
    }
}

fn collect_ids(l: &Layer, ids: &mut Vec<ParamId>) {
    match l {
        Layer::Conv(c) => ids.extend([c.weight, c.bias]),
        Layer::BatchNorm(b) => ids.extend([b.gamma, b.beta, b.running_mean, b.running_var]),
        Layer::Linear(li) => ids.extend([li.weight, li.bias]),
        Layer::Residual(r) => {
            ids.extend(r.body.param_ids());
            if let Some(s) = &r.shortcut {
                ids.extend(s.param_ids());
            }
        }
        Layer::Relu | Layer::MaxPool { .. } | Layer::GlobalAvgPool => {}
    }
}
