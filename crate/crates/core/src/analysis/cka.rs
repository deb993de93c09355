use super::features::{collect_taps, FeatureMatrix, Tap};
use crate::data::{bilinear_resize, Dataset};
use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::model::MsunModel;
use crate::tensor::Tensor;

/// Subtracts each column's mean over samples.
pub fn center_features(x: &FeatureMatrix) -> FeatureMatrix {
    let mut mean = vec![0.0; x.d];
    for i in 0..x.n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= x.n as f64;
    }
    let data = (0..x.n)
        .flat_map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    FeatureMatrix {
        n: x.n,
        d: x.d,
        data,
        source: x.source.clone(),
    }
}

/// `X X^T` as a row-major `n x n` matrix.
pub fn gram(x: &FeatureMatrix) -> Vec<f64> {
    let n = x.n;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(x.row(i), x.row(j));
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CkaValue {
    pub value: f64,
    /// Set when either Gram matrix is zero (constant features); the value
    /// is then reported as 0.
    pub degenerate: bool,
}

/// Linear-kernel CKA of two representations of the same samples.
pub fn cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<CkaValue> {
    if x.n != y.n {
        return Err(Error::ShapeMismatch {
            op: "cka sample count",
            left: vec![x.n, x.d],
            right: vec![y.n, y.d],
        });
    }
    let kx = gram(&center_features(x));
    let ky = gram(&center_features(y));
    let xy = dot(&kx, &ky);
    let xx = dot(&kx, &kx);
    let yy = dot(&ky, &ky);
    if xx == 0.0 || yy == 0.0 {
        return Ok(CkaValue {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CkaValue {
        value: xy / (xx * yy).sqrt(),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkaRecord {
    pub layer: String,
    pub scale_a: usize,
    pub scale_b: usize,
    pub n: usize,
    pub cka: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CkaReport {
    pub records: Vec<CkaRecord>,
}

impl CkaReport {
    pub const HEADER: &'static str = "layer,scale_a,scale_b,n,cka";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            s.push_str(&format!("{},{},{},{},{}\n", r.layer, r.scale_a, r.scale_b, r.n, r.cka));
        }
        s
    }

    pub fn get(&self, layer: &str) -> Option<f64> {
        self.records.iter().find(|r| r.layer == layer).map(|r| r.cka)
    }
}

/// CKA per tap between the model's activations on `xa` and `xb`, which
/// hold the same samples at two sizes. Records are sorted by depth.
pub fn layerwise_cka_pair(
    model: &MsunModel,
    xa: &Tensor<f32>,
    xb: &Tensor<f32>,
    taps: &[Tap],
) -> Result<CkaReport> {
    let mut taps = taps.to_vec();
    taps.sort();
    taps.dedup();
    let fa = collect_taps(model, xa, &taps)?;
    let fb = collect_taps(model, xb, &taps)?;
    let records = taps
        .iter()
        .zip(fa.iter().zip(&fb))
        .map(|(t, (a, b))| {
            Ok(CkaRecord {
                layer: t.to_string(),
                scale_a: xa.shape()[2],
                scale_b: xb.shape()[2],
                n: a.n,
                cka: cka(a, b)?.value,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CkaReport { records })
}

/// Resizes `probe` to both scales and compares activations tap by tap.
pub fn layerwise_cka(
    model: &MsunModel,
    probe: &Dataset,
    scale_a: usize,
    scale_b: usize,
    taps: &[Tap],
) -> Result<CkaReport> {
    let xa = bilinear_resize(&probe.images, scale_a);
    let xb = bilinear_resize(&probe.images, scale_b);
    layerwise_cka_pair(model, &xa, &xb, taps)
}
