use std::sync::atomic::{AtomicU64, Ordering};

use super::backbone::{BackboneSpec, BlockDesc};
use crate::error::{Error, Result};
use crate::nn::{Linear, Sequential};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Element, Tensor};

/// Quantized square input sizes, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSet(Vec<usize>);

impl ScaleSet {
    /// A single size is accepted so that single-branch models share the
    /// same machinery; the multi-scale method itself needs at least two.
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::invalid("scale set must contain positive sizes"));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("scale sizes must be strictly increasing, got {sizes:?}")));
        }
        Ok(ScaleSet(sizes))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn largest(&self) -> usize {
        *self.0.last().expect("non-empty by construction")
    }

    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }
}

/// Index of the quantized size nearest to `input_size`, ties going to the
/// smaller size.
pub fn route_scale(input_size: usize, scales: &ScaleSet) -> usize {
    let mut best = 0;
    let mut best_d = usize::MAX;
    for (i, &r) in scales.sizes().iter().enumerate() {
        let d = r.abs_diff(input_size);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Scale-specific shallow network: the leading blocks adapted to one input
/// size. With zero blocks it only resizes its input to the canonical size.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet {
    pub input_size: usize,
    pub resize_to: Option<usize>,
    pub descs: Vec<BlockDesc>,
    pub blocks: Vec<Sequential>,
}

/// Outputs of one branch. `blocks[j]` is the output of global block `j`.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub blocks: Vec<Var>,
    pub features: Var,
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Debug)]
pub struct MsunModel {
    pub spec: BackboneSpec,
    pub scales: ScaleSet,
    /// Number of leading backbone blocks replicated per subnet.
    pub subnet_blocks: usize,
    pub subnets: Vec<Subnet>,
    pub unified_descs: Vec<BlockDesc>,
    pub unified: Vec<Sequential>,
    pub head: Linear,
    pub params: ParamStore,
    /// Per-sample `[C,H,W]` of every subnet's output.
    pub feature_shape: Vec<usize>,
    calls: Vec<AtomicU64>,
}

impl Clone for MsunModel {
    fn clone(&self) -> Self {
        MsunModel {
            spec: self.spec.clone(),
            scales: self.scales.clone(),
            subnet_blocks: self.subnet_blocks,
            subnets: self.subnets.clone(),
            unified_descs: self.unified_descs.clone(),
            unified: self.unified.clone(),
            head: self.head.clone(),
            params: self.params.clone(),
            feature_shape: self.feature_shape.clone(),
            calls: self.calls.iter().map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

/// Stem variants tried, in order, for a subnet that must downsample by
/// `target` instead of the canonical amount.
fn adapt_stem(canonical: BlockDesc, size: usize, target_side: usize) -> Option<BlockDesc> {
    let BlockDesc::Stem {
        in_ch,
        out_ch,
        kernel,
        stride,
        pool,
    } = canonical
    else {
        return None;
    };
    let mut candidates = vec![(kernel, stride, pool)];
    if pool {
        candidates.push((kernel, stride, false));
    }
    candidates.push((3, 1, true));
    candidates.push((3, 1, false));
    candidates.into_iter().find_map(|(k, s, p)| {
        let d = BlockDesc::Stem {
            in_ch,
            out_ch,
            kernel: k,
            stride: s,
            pool: p,
        };
        (d.out_side(size) == Some(target_side)).then_some(d)
    })
}

fn side_after(descs: &[BlockDesc], mut side: usize) -> Option<usize> {
    for d in descs {
        side = d.out_side(side)?;
    }
    Some(side)
}

/// Vanilla single-branch model at the canonical size.
pub fn build_vanilla(spec: &BackboneSpec, rng: &mut Rng) -> Result<MsunModel> {
    let scales = ScaleSet::new(vec![spec.input_size])?;
    transform_to_msun(spec, 0, &scales, rng)
}

/// Splits the backbone after its first `blocks` blocks: one scale-adapted
/// copy of those blocks per size in `scales`, followed by the shared rest
/// of the network and the classifier.
///
/// Parameters are initialized subnet by subnet (smallest size first), then
/// the unified blocks, then the head, so that a single-scale transform
/// draws exactly the same initial weights as [`build_vanilla`].
pub fn transform_to_msun(
    spec: &BackboneSpec,
    blocks: usize,
    scales: &ScaleSet,
    rng: &mut Rng,
) -> Result<MsunModel> {
    spec.validate()?;
    let descs = spec.block_descs();
    if blocks >= descs.len() {
        return Err(Error::invalid(format!(
            "subnet depth {blocks} must be below the backbone's {} blocks",
            descs.len()
        )));
    }
    if scales.largest() != spec.input_size {
        return Err(Error::invalid(format!(
            "largest scale {} must equal the canonical input size {}",
            scales.largest(),
            spec.input_size
        )));
    }
    let canonical_side = side_after(&descs[..blocks], spec.input_size).ok_or_else(|| Error::StageTooSmall {
        stage: spec.block_label(blocks.saturating_sub(1)),
        input: spec.input_size,
    })?;
    let stem_side = descs[0].out_side(spec.input_size).expect("validated");

    let mut params = ParamStore::new();
    let mut subnets = Vec::with_capacity(scales.len());
    for (i, &size) in scales.sizes().iter().enumerate() {
        let mut sub_descs: Vec<BlockDesc> = descs[..blocks].to_vec();
        if blocks > 0 && size != spec.input_size {
            let reason = || Error::ScaleAdaptation {
                index: i,
                size,
                reason: format!("no stem variant maps {size} to side {stem_side}"),
            };
            sub_descs[0] = adapt_stem(descs[0], size, stem_side).ok_or_else(reason)?;
            if side_after(&sub_descs, size) != Some(canonical_side) {
                return Err(reason());
            }
        }
        let built = sub_descs
            .iter()
            .enumerate()
            .map(|(j, d)| d.build(&mut params, &format!("subnet{i}.block{j}"), rng))
            .collect();
        subnets.push(Subnet {
            input_size: size,
            resize_to: (blocks == 0 && size != spec.input_size).then_some(spec.input_size),
            descs: sub_descs,
            blocks: built,
        });
    }
    let unified_descs = descs[blocks..].to_vec();
    let unified = unified_descs
        .iter()
        .enumerate()
        .map(|(k, d)| d.build(&mut params, &format!("unified.block{}", k + blocks), rng))
        .collect();
    let last_width = *spec.widths.last().expect("validated");
    let head = Linear::new(&mut params, "head", last_width, spec.num_classes, rng);

    let feature_shape = if blocks == 0 {
        vec![spec.in_channels, spec.input_size, spec.input_size]
    } else {
        vec![descs[blocks - 1].out_channels(), canonical_side, canonical_side]
    };
    Ok(MsunModel {
        spec: spec.clone(),
        scales: scales.clone(),
        subnet_blocks: blocks,
        subnets,
        unified_descs,
        unified,
        head,
        params,
        feature_shape,
        calls: (0..scales.len()).map(|_| AtomicU64::new(0)).collect(),
    })
}

impl MsunModel {
    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn num_branches(&self) -> usize {
        self.subnets.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.subnet_blocks + self.unified.len()
    }

    /// Times each subnet ran through [`MsunModel::forward_infer`].
    pub fn call_counts(&self) -> Vec<u64> {
        self.calls.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_call_counts(&self) {
        for c in &self.calls {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// Runs branch `i` on `x`, which must already be at size `R_i`.
    pub fn forward_branch<E: Element>(
        &self,
        tape: &mut Tape<E>,
        i: usize,
        x: Var,
        mode: Mode,
    ) -> Result<BranchOutput> {
        let sub = self
            .subnets
            .get(i)
            .ok_or_else(|| Error::invalid(format!("branch {i} out of range")))?;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[2] != sub.input_size || shape[3] != sub.input_size {
            return Err(Error::InvalidShape {
                op: "forward_branch",
                msg: format!("branch {i} expects [N,C,{0},{0}], got {shape:?}", sub.input_size),
            });
        }
        let mut h = x;
        if let Some(r) = sub.resize_to {
            h = tape.resize(h, r, r)?;
        }
        let mut blocks = Vec::with_capacity(self.total_blocks());
        for b in &sub.blocks {
            h = b.forward(tape, &self.params, h, mode)?;
            blocks.push(h);
        }
        let features = h;
        if tape.shape(features)[1..] != self.feature_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "subnet output",
                left: self.feature_shape.clone(),
                right: tape.shape(features)[1..].to_vec(),
            });
        }
        for b in &self.unified {
            h = b.forward(tape, &self.params, h, mode)?;
            blocks.push(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = self.head.forward(tape, &self.params, pooled)?;
        Ok(BranchOutput {
            blocks,
            features,
            pooled,
            logits,
        })
    }

    /// Every branch on its own copy of the batch. `inputs[i]` holds the
    /// batch at size `R_i`; all must have the same batch size.
    pub fn forward_train<E: Element>(
        &self,
        tape: &mut Tape<E>,
        inputs: &[Var],
        mode: Mode,
    ) -> Result<Vec<BranchOutput>> {
        if inputs.len() != self.num_branches() {
            return Err(Error::invalid(format!(
                "expected {} scale inputs, got {}",
                self.num_branches(),
                inputs.len()
            )));
        }
        let n0 = tape.shape(inputs[0]).first().copied();
        for &x in inputs {
            if tape.shape(x).first().copied() != n0 {
                return Err(Error::ShapeMismatch {
                    op: "per-scale batch size",
                    left: tape.shape(inputs[0]).to_vec(),
                    right: tape.shape(x).to_vec(),
                });
            }
        }
        inputs
            .iter()
            .enumerate()
            .map(|(i, &x)| self.forward_branch(tape, i, x, mode))
            .collect()
    }

    /// Routes a square batch to the nearest-size branch, resizing if its
    /// side differs from that branch's size. Returns the branch output and
    /// its index.
    pub fn forward_infer<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<(BranchOutput, usize)> {
        let side = match *tape.shape(x) {
            [_, _, h, w] if h == w => h,
            ref s => {
                return Err(Error::InvalidShape {
                    op: "forward_infer",
                    msg: format!("expected a square [N,C,R,R] batch, got {s:?}"),
                })
            }
        };
        let i = route_scale(side, &self.scales);
        let r = self.scales.get(i);
        let input = if side == r { x } else { tape.resize(x, r, r)? };
        self.calls[i].fetch_add(1, Ordering::Relaxed);
        Ok((self.forward_branch(tape, i, input, Mode::Eval)?, i))
    }

    /// Eval-mode logits `[N, classes]` for a square batch.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let (out, _) = self.forward_infer(&mut tape, v)?;
        Ok(tape.value(out.logits).clone())
    }
}
