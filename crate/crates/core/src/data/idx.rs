use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: "image file",
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated(format!(
            "image file: {} of {need} pixel bytes",
            body.len()
        )));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: "label file",
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!("label file: {} of {n} labels", body.len())));
    }
    Ok(&body[..n])
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255 and the single
/// channel is replicated to three. Classes are `0..=max(label)`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (n, rows, cols, pixels) = read_idx_images(&ib)?;
    let labs = read_idx_labels(&lb)?;
    if labs.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labs.len(),
        });
    }
    if rows != cols || rows == 0 {
        return Err(Error::Format {
            what: "IDX images",
            msg: format!("expected square non-empty images, got {rows}x{cols}"),
        });
    }
    let plane = rows * cols;
    let mut data = Vec::with_capacity(n * 3 * plane);
    for img in pixels.chunks(plane) {
        for _ in 0..3 {
            data.extend(img.iter().map(|&p| p as f32 / 255.0));
        }
    }
    let classes = labs.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    Dataset::new(
        Tensor::from_parts(vec![n, 3, rows, cols], data),
        labs.iter().map(|&l| l as usize).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
    )
}

/// Writes the first channel quantized to `u8` and the labels as IDX files.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    if ds.num_classes() > 256 {
        return Err(Error::invalid("IDX labels are limited to 256 classes"));
    }
    let size = ds.native_size;
    let plane = size * size;
    let mut ib = Vec::with_capacity(16 + ds.len() * plane);
    for v in [IMAGES_MAGIC, ds.len() as u32, size as u32, size as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..ds.len() {
        ib.extend(ds.sample(i)[..plane].iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lb = Vec::with_capacity(8 + ds.len());
    for v in [LABELS_MAGIC, ds.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images, ib).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lb).map_err(|e| Error::io(labels, e))?;
    Ok(())
}
