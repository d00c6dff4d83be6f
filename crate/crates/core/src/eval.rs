//! Fidelity and temporal-consistency metrics, temporal profiles and CSV reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::warp;
use crate::error::{Error, Result};
use crate::tensor::{FrameStack, Tensor};

/// Value reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const CSV_HEADER: &str = "video_id,psnr_db,ewarp_e3,runtime_s";

fn frame_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean per-frame PSNR in dB for signals in `[0, 1]`.
pub fn psnr(a: &FrameStack, b: &FrameStack) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let n = a.dim(0);
    Ok((0..n)
        .map(|i| frame_psnr(a.frame_slice(i), b.frame_slice(i)))
        .sum::<f64>()
        / n as f64)
}

/// Pixels excluded at each border for a flow field.
pub fn warp_border(flow: &FrameStack) -> usize {
    let max = flow.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max.ceil() as usize + 1
}

/// Mean squared difference between each frame and its successor warped back
/// by `flow`, over interior pixels. Raw units; multiply by 1e3 to report.
pub fn warping_error(video: &FrameStack, flow: &FrameStack) -> Result<f64> {
    if video.rank() != 4 || video.dim(0) < 2 {
        return Err(Error::Data("warping error needs at least two frames".into()));
    }
    let (n, h, w, c) = (video.dim(0), video.dim(1), video.dim(2), video.dim(3));
    if flow.rank() != 4 || flow.shape() != [n - 1, h, w, 2] {
        return Err(Error::Data(format!(
            "flow shape {:?} does not cover video {:?}",
            flow.shape(),
            video.shape()
        )));
    }
    let border = warp_border(flow);
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::Data(format!("border {border} leaves no interior in {h}x{w}")));
    }
    let next = video.frames(1, n - 1)?;
    let warped = warp(&next, flow)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..n - 1 {
        let a = video.frame_slice(t);
        let b = warped.frame_slice(t);
        for y in border..h - border {
            for x in border..w - border {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    total += (a[i] - b[i]) * (a[i] - b[i]);
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Stacks row `row` of every frame into an `[n, w, c]` image.
pub fn temporal_profile(video: &FrameStack, row: usize) -> Result<Tensor> {
    let (n, h, w, c) = (video.dim(0), video.dim(1), video.dim(2), video.dim(3));
    if row >= h {
        return Err(Error::Index {
            what: "profile row",
            index: row,
            len: h,
        });
    }
    let mut data = Vec::with_capacity(n * w * c);
    for t in 0..n {
        let f = video.frame_slice(t);
        data.extend_from_slice(&f[row * w * c..(row + 1) * w * c]);
    }
    Tensor::new(vec![n, w, c], data)
}

/// Binary PPM (P6, maxval 255) of an `[h, w, c]` image with 1 or 3 channels.
pub fn write_ppm<W: Write>(mut out: W, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || !(image.dim(2) == 1 || image.dim(2) == 3) {
        return Err(Error::shape("write_ppm", image.shape(), &[0, 0, 3]));
    }
    let (h, w, c) = (image.dim(0), image.dim(1), image.dim(2));
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(h * w * 3);
    for px in image.data().chunks(c) {
        for ch in 0..3 {
            let v = px[ch.min(c - 1)];
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    write_ppm(std::io::BufWriter::new(std::fs::File::create(path)?), image)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub video_id: String,
    /// Absent when no reference video was available.
    pub psnr_db: Option<f64>,
    /// Warping error in units of 1e-3.
    pub ewarp_e3: f64,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.psnr_db).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_ewarp_e3(&self) -> f64 {
        self.rows.iter().map(|r| r.ewarp_e3).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let num = |v: f64| format!("{v:.8e}");
        for r in &self.rows {
            let psnr = r.psnr_db.map(num).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.video_id, psnr, num(r.ewarp_e3), num(r.runtime_s));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Data("unexpected metric CSV header".into()));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Data(format!("bad number {s:?}: {e}")))
        };
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(Error::Data(format!("malformed CSV row {line:?}")));
                }
                Ok(MetricRow {
                    video_id: f[0].to_string(),
                    psnr_db: if f[1].is_empty() { None } else { Some(parse(f[1])?) },
                    ewarp_e3: parse(f[2])?,
                    runtime_s: parse(f[3])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricReport { rows })
    }
}
