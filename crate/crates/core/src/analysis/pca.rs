use super::cka::center_features;
use super::features::FeatureMatrix;
use crate::error::{Error, Result};

const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub dims: usize,
    /// Row-major `n x dims` coordinates.
    pub coords: Vec<f64>,
    /// Unit principal directions, one per component.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Set when the data has fewer than `dims` non-trivial directions; the
    /// missing components are zero.
    pub rank_deficient: bool,
}

fn mat_vec(c: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| crate::kernels::dot(&c[i * d..(i + 1) * d], v)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Top eigenvector of a symmetric PSD matrix by power iteration from a
/// fixed start vector.
fn power_iteration(c: &[f64], d: usize) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.1 * j as f64).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..MAX_ITERS {
        let mut w = mat_vec(c, &v);
        let nw = norm(&w);
        if nw == 0.0 {
            return (v, 0.0);
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < TOL {
            break;
        }
    }
    let lambda = crate::kernels::dot(&v, &mat_vec(c, &v));
    (v, lambda)
}

/// Projects centered rows onto the top `dims` eigenvectors of the sample
/// covariance, found by power iteration with deflation. Each component's
/// sign makes its largest-magnitude loading positive.
pub fn pca_project(x: &FeatureMatrix, dims: usize) -> Result<Projection> {
    if dims == 0 || x.n <= dims {
        return Err(Error::invalid(format!("PCA to {dims} dims needs more than {dims} samples, got {}", x.n)));
    }
    let xc = center_features(x);
    let d = x.d;
    let mut cov = vec![0.0; d * d];
    for i in 0..x.n {
        let r = xc.row(i);
        for a in 0..d {
            let ra = r[a];
            if ra == 0.0 {
                continue;
            }
            for b in 0..d {
                cov[a * d + b] += ra * r[b];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (x.n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    let mut rank_deficient = false;
    for _ in 0..dims {
        let (mut v, lambda) = power_iteration(&cov, d);
        if rank_deficient || !(lambda > 1e-12 * trace.max(f64::MIN_POSITIVE)) {
            rank_deficient = true;
            components.push(vec![0.0; d]);
            eigenvalues.push(0.0);
            continue;
        }
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, a)| if a.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    let mut coords = Vec::with_capacity(x.n * dims);
    for i in 0..x.n {
        for c in &components {
            coords.push(crate::kernels::dot(xc.row(i), c));
        }
    }
    Ok(Projection {
        dims,
        coords,
        components,
        eigenvalues,
        rank_deficient,
    })
}

/// `sample_id,label,pc1,pc2` rows for a two-dimensional projection.
pub fn pca_csv(p: &Projection, ids: &[u64], labels: &[usize]) -> String {
    let mut s = String::from("sample_id,label,pc1,pc2\n");
    for (i, (id, l)) in ids.iter().zip(labels).enumerate() {
        let row = &p.coords[i * p.dims..(i + 1) * p.dims];
        let pc2 = row.get(1).copied().unwrap_or(0.0);
        s.push_str(&format!("{id},{l},{},{pc2}\n", row[0]));
    }
    s
}
