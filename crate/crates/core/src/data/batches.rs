use std::sync::mpsc::sync_channel;

use super::Dataset;
use crate::error::Result;
use crate::kernels::resize_forward;
use crate::model::ScaleSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// The same samples, in the same order, at every quantized size.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleBatch {
    /// `images[i]` is `[n, C, R_i, R_i]`.
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

/// Half-pixel bilinear resize of a square `[N, C, H, W]` batch to `size`.
pub fn bilinear_resize(x: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = resize_forward(x.data(), n * c, (h, w), (size, size));
    Tensor::from_parts(vec![n, c, size, size], data)
}

/// Shuffled aligned batches over one epoch. The final partial batch is kept.
pub struct MultiScaleStream<'a> {
    dataset: &'a Dataset,
    scales: Vec<usize>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn make_multiscale<'a>(
    dataset: &'a Dataset,
    scales: &ScaleSet,
    batch_size: usize,
    seed: u64,
) -> MultiScaleStream<'a> {
    let order = Rng::new(seed).fork("shuffle").permutation(dataset.len());
    MultiScaleStream {
        dataset,
        scales: scales.sizes().to_vec(),
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

impl MultiScaleStream<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for MultiScaleStream<'_> {
    type Item = MultiScaleBatch;

    fn next(&mut self) -> Option<MultiScaleBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let sub = self.dataset.subset(&self.order[self.pos..end]);
        self.pos = end;
        Some(MultiScaleBatch {
            images: self.scales.iter().map(|&r| bilinear_resize(&sub.images, r)).collect(),
            labels: sub.labels,
        })
    }
}

/// Drives `f` over one epoch of batches. With `threads > 1` batches are
/// assembled on a background thread through a bounded queue; the order is
/// the same either way.
pub fn for_each_batch<F>(stream: MultiScaleStream<'_>, threads: usize, mut f: F) -> Result<()>
where
    F: FnMut(MultiScaleBatch) -> Result<()>,
{
    if threads <= 1 {
        for b in stream {
            f(b)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel(threads);
        scope.spawn(move || {
            for b in stream {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        for b in rx {
            f(b)?;
        }
        Ok(())
    })
}
