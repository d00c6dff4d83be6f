use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{FrameStack, Tensor};

/// Start offsets of tiles of size `tile` along an axis of length `len`.
pub fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if tile >= len {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts.dedup();
    starts
}

/// Unnormalised Gaussian window centred on a `th × tw` tile, σ = tile/4.
pub fn gaussian_window(th: usize, tw: usize) -> Vec<f64> {
    let (sy, sx) = (0.25 * th as f64, 0.25 * tw as f64);
    let (cy, cx) = ((th as f64 - 1.0) / 2.0, (tw as f64 - 1.0) / 2.0);
    let mut w = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            let dy = (y as f64 - cy) / sy;
            let dx = (x as f64 - cx) / sx;
            w.push((-0.5 * (dy * dy + dx * dx)).exp());
        }
    }
    w
}

/// Tile origins of a tiling and the tile size.
#[derive(Clone, Debug)]
pub struct TileLayout {
    pub tiles: Vec<(usize, usize)>,
    pub tile_h: usize,
    pub tile_w: usize,
    pub height: usize,
    pub width: usize,
}

impl TileLayout {
    pub fn new(height: usize, width: usize, tile: usize, overlap: usize) -> Result<Self> {
        if tile == 0 || overlap >= tile {
            return Err(Error::Config(format!("tile {tile} must exceed overlap {overlap}")));
        }
        let (tile_h, tile_w) = (tile.min(height), tile.min(width));
        let ys = tile_starts(height, tile, overlap);
        let xs = tile_starts(width, tile, overlap);
        let tiles = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
        Ok(TileLayout {
            tiles,
            tile_h,
            tile_w,
            height,
            width,
        })
    }

    /// Per-tile blending weights normalised to sum to one at every pixel.
    pub fn weight_maps(&self) -> Vec<Vec<f64>> {
        let window = gaussian_window(self.tile_h, self.tile_w);
        let mut total = vec![0.0; self.height * self.width];
        for &(y0, x0) in &self.tiles {
            for y in 0..self.tile_h {
                for x in 0..self.tile_w {
                    total[(y0 + y) * self.width + x0 + x] += window[y * self.tile_w + x];
                }
            }
        }
        self.tiles
            .iter()
            .map(|&(y0, x0)| {
                let mut m = vec![0.0; self.tile_h * self.tile_w];
                for y in 0..self.tile_h {
                    for x in 0..self.tile_w {
                        m[y * self.tile_w + x] = window[y * self.tile_w + x] / total[(y0 + y) * self.width + x0 + x];
                    }
                }
                m
            })
            .collect()
    }
}

fn crop(video: &FrameStack, y0: usize, x0: usize, th: usize, tw: usize) -> Tensor {
    let (n, w, c) = (video.dim(0), video.dim(2), video.dim(3));
    let mut data = Vec::with_capacity(n * th * tw * c);
    for f in 0..n {
        let frame = video.frame_slice(f);
        for y in y0..y0 + th {
            data.extend_from_slice(&frame[(y * w + x0) * c..(y * w + x0 + tw) * c]);
        }
    }
    Tensor::new(vec![n, th, tw, c], data).expect("crop shape")
}

/// Runs `per_tile` on overlapping spatial tiles and blends the results with
/// normalised Gaussian windows. A tile larger than the frame degenerates to a
/// single pass over the whole frame. Tiles are processed in parallel.
pub fn tile_and_merge<F>(video: &FrameStack, tile: usize, overlap: usize, per_tile: F) -> Result<FrameStack>
where
    F: Fn(&FrameStack) -> Result<FrameStack> + Sync,
{
    if video.rank() != 4 {
        return Err(Error::shape("tile_and_merge", video.shape(), &[0, 0, 0, 0]));
    }
    let (n, h, w, c) = (video.dim(0), video.dim(1), video.dim(2), video.dim(3));
    let layout = TileLayout::new(h, w, tile, overlap)?;
    if layout.tiles.len() == 1 {
        return per_tile(video);
    }
    let weights = layout.weight_maps();
    let outputs: Vec<Tensor> = layout
        .tiles
        .par_iter()
        .map(|&(y0, x0)| {
            let out = per_tile(&crop(video, y0, x0, layout.tile_h, layout.tile_w))?;
            if out.shape() != [n, layout.tile_h, layout.tile_w, c] {
                return Err(Error::shape(
                    "tile output",
                    out.shape(),
                    &[n, layout.tile_h, layout.tile_w, c],
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut merged = Tensor::zeros(vec![n, h, w, c]);
    let (th, tw) = (layout.tile_h, layout.tile_w);
    for ((&(y0, x0), out), wmap) in layout.tiles.iter().zip(&outputs).zip(&weights) {
        for f in 0..n {
            let src = out.frame_slice(f);
            let dst = merged.frame_slice_mut(f);
            for y in 0..th {
                for x in 0..tw {
                    let wt = wmap[y * tw + x];
                    let so = (y * tw + x) * c;
                    let d = ((y0 + y) * w + x0 + x) * c;
                    for ch in 0..c {
                        dst[d + ch] += wt * src[so + ch];
                    }
                }
            }
        }
    }
    Ok(merged)
}
