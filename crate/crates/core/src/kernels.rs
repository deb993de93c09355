//! Slice-level forward and backward kernels behind the tape operations.
//!
//! Storage is the tape element type; every reduction and every matrix
//! product accumulates in `f64`. Summation order is fixed by the code, so
//! results are bit-reproducible for identical inputs.

use crate::tensor::Element;

/// Dot product with eight interleaved `f64` partial sums.
#[inline]
pub fn dot<E: Element>(a: &[E], b: &[E]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l].to_f64() * y[l].to_f64();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.to_f64() * y.to_f64();
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn sum_f64<E: Element>(a: &[E]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.chunks_exact(4);
    let rem = chunks.remainder();
    for c in chunks {
        for l in 0..4 {
            acc[l] += c[l].to_f64();
        }
    }
    let tail: f64 = rem.iter().map(|v| v.to_f64()).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// `acc[n×m] += a[n×k] · b[k×m]`.
pub fn gemm_nn_acc<E: Element>(a: &[E], b: &[E], n: usize, k: usize, m: usize, acc: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(acc.len(), n * m);
    for i in 0..n {
        let row = &mut acc[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv.to_f64();
            }
        }
    }
}

/// `acc[n×m] += a[n×k] · b[m×k]ᵀ`.
pub fn gemm_nt_acc<E: Element>(a: &[E], b: &[E], n: usize, k: usize, m: usize, acc: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(acc.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            acc[i * m + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `acc[k×m] += a[n×k]ᵀ · b[n×m]`.
pub fn gemm_tn_acc<E: Element>(a: &[E], b: &[E], n: usize, k: usize, m: usize, acc: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(acc.len(), k * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let row = &mut acc[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv.to_f64();
            }
        }
    }
}

pub fn to_elems<E: Element>(acc: &[f64]) -> Vec<E> {
    acc.iter().map(|&v| E::from_f64(v)).collect()
}

pub fn matmul<E: Element>(a: &[E], b: &[E], n: usize, k: usize, m: usize) -> Vec<E> {
    let mut acc = vec![0.0; n * m];
    gemm_nn_acc(a, b, n, k, m, &mut acc);
    to_elems(&acc)
}

/// Geometry of a 2-D convolution or pooling window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when the window does not fit.
    pub fn out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < kernel || stride == 0 {
            None
        } else {
            Some((padded - kernel) / stride + 1)
        }
    }

    pub fn out_hw(&self) -> Option<(usize, usize)> {
        Some((
            Self::out_len(self.height, self.kernel, self.stride, self.pad)?,
            Self::out_len(self.width, self.kernel, self.stride, self.pad)?,
        ))
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one `[C,H,W]` image into a `[C·k·k, H'·W']` column matrix.
pub fn im2col<E: Element>(x: &[E], g: &ConvGeom, oh: usize, ow: usize, cols: &mut [E]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let p = oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    for c in 0..g.channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = E::ZERO);
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column-gradient matrix back onto the image gradient (adds).
pub fn col2im_add(dcols: &[f64], g: &ConvGeom, oh: usize, ow: usize, dx: &mut [f64]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let p = oh * ow;
    for c in 0..g.channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let src = &dcols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over `[N·C]` planes. Returns values and the flat input index
/// of each window's maximum; ties go to the lowest index.
pub fn maxpool_forward<E: Element>(
    x: &[E],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> (Vec<E>, Vec<u32>) {
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (oy * stride) * w + ox * stride;
                let mut best = x[best_idx];
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for dx in 0..window {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

/// One axis of a half-pixel bilinear resampling: for each output index, the
/// two source taps and the weight of the second.
#[derive(Clone, Debug)]
pub struct ResizeAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResizeAxis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let f = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            lo.push(i0);
            hi.push(i1);
            frac.push(f);
        }
        ResizeAxis { lo, hi, frac }
    }
}

pub fn resize_forward<E: Element>(
    x: &[E],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<E> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ay = ResizeAxis::new(h, oh);
    let ax = ResizeAxis::new(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let top = src[y0 * w + x0].to_f64() * (1.0 - fx) + src[y0 * w + x1].to_f64() * fx;
                let bot = src[y1 * w + x0].to_f64() * (1.0 - fx) + src[y1 * w + x1].to_f64() * fx;
                out.push(E::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    out
}

pub fn resize_backward<E: Element>(
    dy: &[E],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<E> {
    if (h, w) == (oh, ow) {
        return dy.to_vec();
    }
    let ay = ResizeAxis::new(h, oh);
    let ax = ResizeAxis::new(w, ow);
    let mut dx = vec![0.0f64; planes * h * w];
    for pl in 0..planes {
        let d = &mut dx[pl * h * w..(pl + 1) * h * w];
        let g = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let v = g[oy * ow + ox].to_f64();
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    to_elems(&dx)
}

/// Row-wise softmax in `f64` with max subtraction.
pub fn softmax_rows<E: Element>(logits: &[E], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}
