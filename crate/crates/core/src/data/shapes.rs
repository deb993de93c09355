use std::f64::consts::PI;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 8] = ["disk", "square", "triangle", "cross", "ring", "bar", "diamond", "checker"];

const SUPERSAMPLE: usize = 4;
const NOISE_STD: f64 = 0.05;

struct ShapeParams {
    cx: f64,
    cy: f64,
    radius: f64,
    cos: f64,
    sin: f64,
    background: f64,
    foreground: f64,
}

impl ShapeParams {
    fn draw(rng: &mut Rng) -> Self {
        let angle = rng.uniform_range(0.0, 2.0 * PI);
        let background = rng.uniform_range(0.0, 0.3);
        ShapeParams {
            cx: rng.uniform_range(-0.3, 0.3),
            cy: rng.uniform_range(-0.3, 0.3),
            radius: rng.uniform_range(0.4, 0.65),
            cos: angle.cos(),
            sin: angle.sin(),
            background,
            foreground: rng.uniform_range(0.6, 1.0),
        }
    }
}

/// Membership of a point in the unit-scale shape, in shape coordinates.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => u * u + v * v <= 1.0,
        1 => au <= 0.8 && av <= 0.8,
        2 => v >= -0.5 && v <= 1.0 - 3f64.sqrt() * au,
        3 => (au <= 0.3 && av <= 0.9) || (av <= 0.3 && au <= 0.9),
        4 => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        5 => au <= 0.95 && av <= 0.25,
        6 => au / 0.55 + av <= 1.0,
        7 => {
            au <= 0.9 && av <= 0.9 && {
                let cu = ((u + 0.9) / 0.6).floor() as i64;
                let cv = ((v + 0.9) / 0.6).floor() as i64;
                (cu + cv) % 2 == 0
            }
        }
        _ => false,
    }
}

/// Anti-aliased grayscale render followed by clamped Gaussian noise.
fn render(class: usize, p: &ShapeParams, size: usize, rng: &mut Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size);
    let step = 2.0 / size as f64;
    let sub = step / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                let y = -1.0 + py as f64 * step + (sy as f64 + 0.5) * sub - p.cy;
                for sx in 0..SUPERSAMPLE {
                    let x = -1.0 + px as f64 * step + (sx as f64 + 0.5) * sub - p.cx;
                    let u = (p.cos * x + p.sin * y) / p.radius;
                    let v = (-p.sin * x + p.cos * y) / p.radius;
                    hits += inside(class, u, v) as usize;
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let val = p.background + (p.foreground - p.background) * cover + NOISE_STD * rng.normal();
            out.push(val.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Renders generator samples `ids` at `size`. Sample `id` always has the
/// same class, placement and brightness whatever the size; only the pixel
/// grid and its noise differ.
pub fn render_shapes(seed: u64, n_classes: usize, size: usize, ids: &[u64]) -> Result<Dataset> {
    if n_classes == 0 || n_classes > SHAPE_NAMES.len() {
        return Err(Error::invalid(format!(
            "n_classes must be in 1..={}, got {n_classes}",
            SHAPE_NAMES.len()
        )));
    }
    if size < 8 {
        return Err(Error::invalid(format!("shape images need size >= 8, got {size}")));
    }
    let root = Rng::new(seed).fork("shapes");
    let plane = size * size;
    let mut data = Vec::with_capacity(ids.len() * 3 * plane);
    let mut labels = Vec::with_capacity(ids.len());
    for &id in ids {
        let class = (id % n_classes as u64) as usize;
        let mut params_rng = root.fork_index("params", id);
        let p = ShapeParams::draw(&mut params_rng);
        let mut noise_rng = root.fork_index("noise", id ^ ((size as u64) << 40));
        let gray = render(class, &p, size, &mut noise_rng);
        for _ in 0..3 {
            data.extend_from_slice(&gray);
        }
        labels.push(class);
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![ids.len(), 3, size, size], data),
        labels,
        class_names: SHAPE_NAMES[..n_classes].iter().map(|s| s.to_string()).collect(),
        native_size: size,
        ids: ids.to_vec(),
    })
}

/// `n_samples` shape images; classes cycle so the histogram is balanced
/// whenever `n_classes` divides `n_samples`.
pub fn gen_shapes(seed: u64, n_samples: usize, n_classes: usize, size: usize) -> Result<Dataset> {
    let ids: Vec<u64> = (0..n_samples as u64).collect();
    render_shapes(seed, n_classes, size, &ids)
}
