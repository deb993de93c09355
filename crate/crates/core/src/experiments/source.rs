use std::path::PathBuf;

use crate::data::{gen_shapes, load_idx, render_shapes, Dataset};
use crate::error::Result;

/// Where training and test images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Procedural shapes. Test sets at other sizes are rendered natively
    /// from the same samples.
    Shapes {
        seed: u64,
        classes: usize,
        n_train: usize,
        n_test: usize,
    },
    /// IDX files. Test sets at other sizes are bilinear resizes.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DataSource {
    /// Train and test sets at `size`.
    pub fn load(&self, size: usize) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Shapes {
                seed,
                classes,
                n_train,
                n_test,
            } => {
                let total = n_train + n_test;
                let all = gen_shapes(*seed, total, *classes, size)?;
                Ok(all.split(*n_train as f64 / total.max(1) as f64, *seed))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let tr = load_idx(train_images, train_labels)?;
                let te = load_idx(test_images, test_labels)?;
                let fix = |d: Dataset| if d.native_size == size { d } else { d.resized(size) };
                Ok((fix(tr), fix(te)))
            }
        }
    }

    /// The test samples of `test` presented at `size`.
    pub fn test_at(&self, test: &Dataset, size: usize) -> Result<Dataset> {
        match self {
            DataSource::Shapes { seed, classes, .. } => render_shapes(*seed, *classes, size, &test.ids),
            DataSource::Idx { .. } => Ok(if test.native_size == size {
                test.clone()
            } else {
                test.resized(size)
            }),
        }
    }
}
