use crate::error::{Error, Result};
use crate::model::{route_scale, MsunModel};
use crate::nn::{Layer, Sequential};

/// Cost of one layer. Linear layers are listed with `k = 1` and a 1x1
/// output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsRecord {
    pub name: String,
    pub n_in: usize,
    pub m_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsReport {
    pub layers: Vec<FlopsRecord>,
    pub params: usize,
}

impl FlopsReport {
    pub const HEADER: &'static str = "layer,n_in,m_out,k,h_out,w_out,flops";

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                l.name, l.n_in, l.m_out, l.k, l.h_out, l.w_out, l.flops
            ));
        }
        s.push_str(&format!("total,,,,,,{}\n", self.total()));
        s
    }
}

fn walk(layers: &[Layer], shape: &mut Vec<usize>, out: &mut Vec<FlopsRecord>) -> Result<()> {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                let next = layer.out_shape(shape)?;
                let (h, w) = (next[1], next[2]);
                out.push(FlopsRecord {
                    name: c.name.clone(),
                    n_in: c.in_channels,
                    m_out: c.out_channels,
                    k: c.kernel,
                    h_out: h,
                    w_out: w,
                    flops: 2 * (c.in_channels * c.out_channels * c.kernel * c.kernel * h * w) as u64,
                });
                *shape = next;
            }
            Layer::Linear(l) => {
                *shape = layer.out_shape(shape)?;
                out.push(FlopsRecord {
                    name: l.name.clone(),
                    n_in: l.in_features,
                    m_out: l.out_features,
                    k: 1,
                    h_out: 1,
                    w_out: 1,
                    flops: 2 * (l.in_features * l.out_features) as u64,
                });
            }
            Layer::Residual(r) => {
                let input = shape.clone();
                walk(&r.body.layers, shape, out)?;
                if let Some(sc) = &r.shortcut {
                    let mut s = input;
                    walk(&sc.layers, &mut s, out)?;
                }
            }
            _ => *shape = layer.out_shape(shape)?,
        }
    }
    Ok(())
}

/// Per-layer costs of `seq` on a per-sample input shape (`[C,H,W]`).
/// The parameter count is left at 0 since a bare layer stack has no store.
pub fn sequential_flops(seq: &Sequential, input: &[usize]) -> Result<FlopsReport> {
    let mut shape = input.to_vec();
    let mut layers = Vec::new();
    walk(&seq.layers, &mut shape, &mut layers)?;
    Ok(FlopsReport { layers, params: 0 })
}

/// Inference cost of one square input of side `input_size`: the routed
/// subnet, the unified network and the classifier. Resizing is free.
pub fn count_flops(model: &MsunModel, input_size: usize) -> Result<FlopsReport> {
    if input_size == 0 {
        return Err(Error::invalid("input size must be positive"));
    }
    let i = route_scale(input_size, &model.scales);
    let sub = &model.subnets[i];
    let mut shape = vec![model.spec.in_channels, sub.input_size, sub.input_size];
    if let Some(r) = sub.resize_to {
        shape = vec![shape[0], r, r];
    }
    let mut layers = Vec::new();
    for b in sub.blocks.iter().chain(&model.unified) {
        walk(&b.layers, &mut shape, &mut layers)?;
    }
    shape = vec![shape[0]];
    walk(&[Layer::Linear(model.head.clone())], &mut shape, &mut layers)?;
    Ok(FlopsReport {
        layers,
        params: count_params(model),
    })
}

/// Trainable scalars.
pub fn count_params(model: &MsunModel) -> usize {
    model.params.num_trainable()
}
