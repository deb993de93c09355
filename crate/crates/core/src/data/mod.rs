//! Datasets: procedural shapes, IDX files and aligned multi-scale batches.

mod batches;
mod idx;
mod shapes;

pub use batches::{bilinear_resize, for_each_batch, make_multiscale, MultiScaleBatch, MultiScaleStream};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use shapes::{gen_shapes, render_shapes, SHAPE_NAMES};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Square images in `[0,1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]` with `H == W == native_size`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub native_size: usize,
    /// Generator index of each sample, so the same samples can be rendered
    /// again at another size. For loaded files this is the record index.
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let (n, size) = match *images.shape() {
            [n, _, h, w] if h == w => (n, h),
            ref s => {
                return Err(Error::InvalidShape {
                    op: "dataset",
                    msg: format!("expected square [N,C,H,W] images, got {s:?}"),
                })
            }
        };
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: class_names.len(),
            });
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
            native_size: size,
            ids: (0..n as u64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn sample_len(&self) -> usize {
        self.images.numel() / self.len().max(1)
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let k = self.sample_len();
        &self.images.data()[i * k..(i + 1) * k]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let k = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::from_parts(shape, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            native_size: self.native_size,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Seeded split: the first `round(train_fraction * N)` samples of a
    /// permutation form the training set, the rest the test set.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let perm = Rng::new(seed).fork("split").permutation(self.len());
        let k = (self.len() as f64 * train_fraction).round() as usize;
        (self.subset(&perm[..k]), self.subset(&perm[k..]))
    }

    /// Every image bilinearly resized to `size`.
    pub fn resized(&self, size: usize) -> Dataset {
        Dataset {
            images: bilinear_resize(&self.images, size),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            native_size: size,
            ids: self.ids.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
