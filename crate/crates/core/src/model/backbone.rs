use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::{BatchNorm2d, Conv2d, Layer, Residual, Sequential};
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// conv3x3 - BN - ReLU
    Plain,
    /// Two conv3x3/BN pairs with an identity or 1x1 projection shortcut.
    Residual,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Plain => "plain",
            BlockKind::Residual => "residual",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BlockKind::Plain),
            "residual" => Ok(BlockKind::Residual),
            _ => Err(Error::invalid(format!("unknown block kind `{s}` (plain|residual)"))),
        }
    }
}

/// A small configurable CNN: a stem block followed by `widths.len()` stages
/// of `blocks_per_stage` blocks. Every stage after the first halves the
/// resolution in its first block.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub block_kind: BlockKind,
    pub num_classes: usize,
    /// Canonical (largest) square input side.
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            block_kind: BlockKind::Plain,
            num_classes: 6,
            input_size: 64,
            in_channels: 3,
            stem_kernel: 5,
            stem_stride: 2,
            stem_pool: true,
        }
    }
}

/// Architecture of one block, before parameters are allocated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockDesc {
    Stem {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pool: bool,
    },
    Body {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        kind: BlockKind,
    },
}

impl BlockDesc {
    /// Spatial side length after this block, `None` if it collapses.
    pub fn out_side(&self, side: usize) -> Option<usize> {
        match *self {
            BlockDesc::Stem {
                kernel,
                stride,
                pool,
                ..
            } => {
                let s = ConvGeom::out_len(side, kernel, stride, kernel / 2)?;
                if pool {
                    (s >= 2).then(|| (s - 2) / 2 + 1)
                } else {
                    Some(s)
                }
            }
            BlockDesc::Body { stride, .. } => ConvGeom::out_len(side, 3, stride, 1),
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            BlockDesc::Stem { out_ch, .. } | BlockDesc::Body { out_ch, .. } => out_ch,
        }
    }

    /// Allocates parameters under `path` and returns the block.
    pub fn build(&self, store: &mut ParamStore, path: &str, rng: &mut Rng) -> Sequential {
        let mut seq = Sequential::new(path);
        match *self {
            BlockDesc::Stem {
                in_ch,
                out_ch,
                kernel,
                stride,
                pool,
            } => {
                seq.push(Layer::Conv(Conv2d::new(
                    store,
                    format!("{path}.conv"),
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    kernel / 2,
                    rng,
                )));
                seq.push(Layer::BatchNorm(BatchNorm2d::new(store, format!("{path}.bn"), out_ch)));
                seq.push(Layer::Relu);
                if pool {
                    seq.push(Layer::MaxPool { window: 2, stride: 2 });
                }
            }
            BlockDesc::Body {
                in_ch,
                out_ch,
                stride,
                kind: BlockKind::Plain,
            } => {
                seq.push(Layer::Conv(Conv2d::new(
                    store,
                    format!("{path}.conv"),
                    in_ch,
                    out_ch,
                    3,
                    stride,
                    1,
                    rng,
                )));
                seq.push(Layer::BatchNorm(BatchNorm2d::new(store, format!("{path}.bn"), out_ch)));
                seq.push(Layer::Relu);
            }
            BlockDesc::Body {
                in_ch,
                out_ch,
                stride,
                kind: BlockKind::Residual,
            } => {
                let mut body = Sequential::new(format!("{path}.body"));
                body.push(Layer::Conv(Conv2d::new(
                    store,
                    format!("{path}.conv1"),
                    in_ch,
                    out_ch,
                    3,
                    stride,
                    1,
                    rng,
                )));
                body.push(Layer::BatchNorm(BatchNorm2d::new(store, format!("{path}.bn1"), out_ch)));
                body.push(Layer::Relu);
                body.push(Layer::Conv(Conv2d::new(
                    store,
                    format!("{path}.conv2"),
                    out_ch,
                    out_ch,
                    3,
                    1,
                    1,
                    rng,
                )));
                body.push(Layer::BatchNorm(BatchNorm2d::new(store, format!("{path}.bn2"), out_ch)));
                let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
                    let mut s = Sequential::new(format!("{path}.shortcut"));
                    s.push(Layer::Conv(Conv2d::new(
                        store,
                        format!("{path}.short_conv"),
                        in_ch,
                        out_ch,
                        1,
                        stride,
                        0,
                        rng,
                    )));
                    s.push(Layer::BatchNorm(BatchNorm2d::new(
                        store,
                        format!("{path}.short_bn"),
                        out_ch,
                    )));
                    s
                });
                seq.push(Layer::Residual(Residual { body, shortcut }));
            }
        }
        seq
    }
}

impl BackboneSpec {
    pub fn stem_desc(&self) -> BlockDesc {
        BlockDesc::Stem {
            in_ch: self.in_channels,
            out_ch: self.widths[0],
            kernel: self.stem_kernel,
            stride: self.stem_stride,
            pool: self.stem_pool,
        }
    }

    /// Stem first, then every stage block in order.
    pub fn block_descs(&self) -> Vec<BlockDesc> {
        let mut out = vec![self.stem_desc()];
        let mut prev = self.widths[0];
        for (j, &w) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                out.push(BlockDesc::Body {
                    in_ch: prev,
                    out_ch: w,
                    stride: if j > 0 && b == 0 { 2 } else { 1 },
                    kind: self.block_kind,
                });
                prev = w;
            }
        }
        out
    }

    pub fn total_blocks(&self) -> usize {
        1 + self.widths.len() * self.blocks_per_stage
    }

    /// Human-readable name of block `index` ("stem", "stage2.block0").
    pub fn block_label(&self, index: usize) -> String {
        if index == 0 {
            "stem".to_string()
        } else {
            let j = (index - 1) / self.blocks_per_stage.max(1);
            let b = (index - 1) % self.blocks_per_stage.max(1);
            format!("stage{j}.block{b}")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("backbone widths must be a non-empty list of positive integers"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::invalid("blocks_per_stage must be at least 1"));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::invalid("class and input channel counts must be positive"));
        }
        if self.stem_kernel == 0 || self.stem_kernel % 2 == 0 || self.stem_stride == 0 {
            return Err(Error::invalid("stem kernel must be odd and stem stride positive"));
        }
        let mut side = self.input_size;
        for (i, d) in self.block_descs().iter().enumerate() {
            side = match d.out_side(side) {
                Some(s) if s >= 1 => s,
                _ => {
                    return Err(Error::StageTooSmall {
                        stage: self.block_label(i),
                        input: self.input_size,
                    })
                }
            };
        }
        Ok(())
    }
}
