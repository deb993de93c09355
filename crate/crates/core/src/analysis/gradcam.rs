use crate::error::{Error, Result};
use crate::model::MsunModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCamMap {
    pub class: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative.
    pub map: Vec<f64>,
    /// One weight per channel of `activations`.
    pub alpha: Vec<f64>,
    /// `[K, H, W]` activations of the last block.
    pub activations: Vec<f64>,
}

/// `relu(sum_k alpha_k * A_k)` over `[K, h, w]` activations.
pub fn grad_cam_from_parts(alpha: &[f64], activations: &[f64], h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut map = vec![0.0; plane];
    for (k, &a) in alpha.iter().enumerate() {
        for (m, &v) in map.iter_mut().zip(&activations[k * plane..(k + 1) * plane]) {
            *m += a * v;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    map
}

/// Class activation map for the first image of `x` (eval mode). The
/// channel weights are spatial means of the class logit's gradient with
/// respect to the last block's output.
pub fn grad_cam(model: &MsunModel, x: &Tensor<f32>, class: usize) -> Result<GradCamMap> {
    let classes = model.spec.num_classes;
    if class >= classes {
        return Err(Error::LabelOutOfRange { label: class, classes });
    }
    let s = x.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::InvalidShape {
            op: "grad_cam",
            msg: format!("expected a [N,C,R,R] batch, got {s:?}"),
        });
    }
    let one = Tensor::from_slice(&[1, s[1], s[2], s[3]], &x.data()[..s[1] * s[2] * s[3]])?;
    let mut tape: Tape<f32> = Tape::new();
    let input = tape.constant(one);
    let (out, _) = model.forward_infer(&mut tape, input)?;
    let a = *out.blocks.last().expect("at least one block");
    let mut pick = vec![0.0f32; classes];
    pick[class] = 1.0;
    let sel = tape.constant(Tensor::from_slice(&[1, classes], &pick)?);
    let prod = tape.mul(out.logits, sel)?;
    let score = tape.sum(prod);
    tape.backward(score)?;

    let ashape = tape.shape(a).to_vec();
    let (k, h, w) = (ashape[1], ashape[2], ashape[3]);
    let plane = h * w;
    let activations: Vec<f64> = tape.data(a).iter().map(|&v| v as f64).collect();
    let alpha: Vec<f64> = match tape.grad(a) {
        Some(g) => (0..k)
            .map(|c| g[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
            .collect(),
        None => vec![0.0; k],
    };
    Ok(GradCamMap {
        class,
        height: h,
        width: w,
        map: grad_cam_from_parts(&alpha, &activations, h, w),
        alpha,
        activations,
    })
}

/// Plain-text greyscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub max_value: u32,
    pub pixels: Vec<u32>,
}

/// ASCII PGM (P2) scaled so the map maximum is 255; an all-zero map stays
/// zero.
pub fn write_pgm(map: &[f64], width: usize, height: usize) -> String {
    let max = map.iter().copied().fold(0.0f64, f64::max);
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in map.chunks(width.max(1)) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let q = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                (q.clamp(0.0, 255.0) as u32).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_pgm(text: &str) -> Result<Pgm> {
    let bad = |msg: String| Error::Format { what: "PGM", msg };
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 signature".into()));
    }
    let mut num = |what: &str| -> Result<u32> {
        tokens
            .next()
            .ok_or_else(|| bad(format!("missing {what}")))?
            .parse::<u32>()
            .map_err(|e| bad(format!("{what}: {e}")))
    };
    let width = num("width")? as usize;
    let height = num("height")? as usize;
    let max_value = num("max value")?;
    if max_value == 0 || max_value > 65535 {
        return Err(bad(format!("max value {max_value} out of range")));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let p = num("pixel")?;
        if p > max_value {
            return Err(bad(format!("pixel {p} exceeds max value {max_value}")));
        }
        pixels.push(p);
    }
    if tokens.next().is_some() {
        return Err(bad("trailing data after pixels".into()));
    }
    Ok(Pgm {
        width,
        height,
        max_value,
        pixels,
    })
}
