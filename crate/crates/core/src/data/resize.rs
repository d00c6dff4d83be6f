//! Separable bicubic resampling (Keys kernel, a = -0.5) with antialiasing
//! when shrinking, plus Gaussian blur.

use crate::error::{Error, Result};
use crate::tensor::{FrameStack, Tensor};

fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// For each output index, the source indices and normalised weights.
fn contributions(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let wgt = cubic((center - i as f64) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, in_len as i64 - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Applies per-axis taps to `[n, h, w, c]`: first along width, then height.
fn apply_separable(
    x: &FrameStack,
    out_h: usize,
    out_w: usize,
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
) -> Result<FrameStack> {
    let (n, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Vec::with_capacity(n * out_h * out_w * c);
    let mut tmp = vec![0.0; h * out_w * c];
    for b in 0..n {
        let f = x.frame_slice(b);
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            for (ox, taps) in cols.iter().enumerate() {
                let dst = &mut tmp[(y * out_w + ox) * c..(y * out_w + ox + 1) * c];
                for &(sx, wgt) in taps {
                    let src = &f[(y * w + sx) * c..(y * w + sx + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wgt * s;
                    }
                }
            }
        }
        for taps in rows {
            for ox in 0..out_w {
                for ch in 0..c {
                    let v: f64 = taps
                        .iter()
                        .map(|&(sy, wgt)| wgt * tmp[(sy * out_w + ox) * c + ch])
                        .sum();
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(vec![n, out_h, out_w, c], out)
}

/// Bicubic resize of every frame to `out_h × out_w`.
pub fn resize_bicubic(x: &FrameStack, out_h: usize, out_w: usize) -> Result<FrameStack> {
    if x.rank() != 4 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bicubic", x.shape(), &[out_h, out_w]));
    }
    let rows = contributions(x.dim(1), out_h);
    let cols = contributions(x.dim(2), out_w);
    apply_separable(x, out_h, out_w, &rows, &cols)
}

pub fn downsample(x: &FrameStack, factor: usize) -> Result<FrameStack> {
    if x.rank() != 4 || factor == 0 || x.dim(1) % factor != 0 || x.dim(2) % factor != 0 {
        return Err(Error::Data(format!(
            "frame size {:?} is not divisible by {factor}",
            &x.shape()[1..x.rank().min(3)]
        )));
    }
    resize_bicubic(x, x.dim(1) / factor, x.dim(2) / factor)
}

pub fn upsample(x: &FrameStack, factor: usize) -> Result<FrameStack> {
    if x.rank() != 4 || factor == 0 {
        return Err(Error::shape("upsample", x.shape(), &[factor]));
    }
    resize_bicubic(x, x.dim(1) * factor, x.dim(2) * factor)
}

/// Gaussian blur with clamp-to-edge borders; `sigma == 0` is the identity.
pub fn gaussian_blur(x: &FrameStack, sigma: f64) -> Result<FrameStack> {
    if x.rank() != 4 || sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("invalid blur sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let taps = |len: usize| -> Vec<Vec<(usize, f64)>> {
        (0..len as i64)
            .map(|i| {
                let mut t: Vec<(usize, f64)> = Vec::new();
                for (k, kw) in (-radius..=radius).zip(&kernel) {
                    let idx = (i + k).clamp(0, len as i64 - 1) as usize;
                    match t.iter_mut().find(|(j, _)| *j == idx) {
                        Some(e) => e.1 += kw / total,
                        None => t.push((idx, kw / total)),
                    }
                }
                t
            })
            .collect()
    };
    apply_separable(x, x.dim(1), x.dim(2), &taps(x.dim(1)), &taps(x.dim(2)))
}
