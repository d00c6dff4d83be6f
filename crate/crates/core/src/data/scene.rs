//! Procedural textured scenes moving under a known affine motion.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{FrameStack, Tensor};

const MAIN_WAVES: usize = 8;
const NOISE_WAVES: usize = 24;

/// Per-frame motion increment. Rotation and scale act about the frame centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Motion {
    Static,
    Translation {
        dx: f64,
        dy: f64,
    },
    Similarity {
        dx: f64,
        dy: f64,
        rotation: f64,
        scale: f64,
    },
}

impl Motion {
    /// Random sub-pixel motion with speed up to `max_speed` pixels per frame.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_speed: f64) -> Motion {
        let speed = rng.gen_range(0.25 * max_speed..=max_speed);
        let angle = rng.gen_range(0.0..2.0 * PI);
        let (dx, dy) = (speed * angle.cos(), speed * angle.sin());
        if rng.gen_bool(0.5) {
            Motion::Translation { dx, dy }
        } else {
            Motion::Similarity {
                dx,
                dy,
                rotation: rng.gen_range(-0.02..0.02),
                scale: rng.gen_range(0.99..1.01),
            }
        }
    }
}

/// Affine map `p -> A p + b` on pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    a: [[f64; 2]; 2],
    b: [f64; 2],
}

impl Affine {
    const IDENTITY: Affine = Affine {
        a: [[1.0, 0.0], [0.0, 1.0]],
        b: [0.0, 0.0],
    };

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.b[0],
            self.a[1][0] * x + self.a[1][1] * y + self.b[1],
        )
    }

    /// `self ∘ other`.
    fn then_after(&self, other: &Affine) -> Affine {
        let mut a = [[0.0; 2]; 2];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.a[i][0] * other.a[0][j] + self.a[i][1] * other.a[1][j];
            }
        }
        let (bx, by) = self.apply(other.b[0], other.b[1]);
        Affine { a, b: [bx, by] }
    }

    fn inverse(&self) -> Affine {
        let [[p, q], [r, s]] = self.a;
        let det = p * s - q * r;
        let a = [[s / det, -q / det], [-r / det, p / det]];
        let b = [
            -(a[0][0] * self.b[0] + a[0][1] * self.b[1]),
            -(a[1][0] * self.b[0] + a[1][1] * self.b[1]),
        ];
        Affine { a, b }
    }
}

fn step_transform(motion: Motion, cx: f64, cy: f64) -> Affine {
    match motion {
        Motion::Static => Affine::IDENTITY,
        Motion::Translation { dx, dy } => Affine {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [dx, dy],
        },
        Motion::Similarity {
            dx,
            dy,
            rotation,
            scale,
        } => {
            let (s, c) = rotation.sin_cos();
            let a = [[scale * c, -scale * s], [scale * s, scale * c]];
            // Rotate and scale about the centre, then translate.
            let b = [
                cx - (a[0][0] * cx + a[0][1] * cy) + dx,
                cy - (a[1][0] * cx + a[1][1] * cy) + dy,
            ];
            Affine { a, b }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Wave {
    freq: [f64; 2],
    phase: f64,
    amplitude: f64,
    color: [f64; 3],
}

/// Continuous texture: a sum of sinusoids plus a band of weaker
/// high-frequency components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    waves: Vec<Wave>,
    base: [f64; 3],
}

impl Texture {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Texture {
        let mut waves = Vec::with_capacity(MAIN_WAVES + NOISE_WAVES);
        let mut push = |rng: &mut R, count: usize, band: (f64, f64), budget: f64| {
            let raw: Vec<f64> = (0..count).map(|_| rng.gen_range(0.5..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for r in raw {
                let mag = rng.gen_range(band.0..band.1);
                let dir = rng.gen_range(0.0..2.0 * PI);
                waves.push(Wave {
                    freq: [mag * dir.cos(), mag * dir.sin()],
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amplitude: budget * r / total,
                    color: [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ],
                });
            }
        };
        // Frequencies in cycles per pixel.
        push(rng, MAIN_WAVES, (0.02, 0.12), 0.32);
        push(rng, NOISE_WAVES, (0.12, 0.25), 0.08);
        let base = [
            rng.gen_range(0.4..0.6),
            rng.gen_range(0.4..0.6),
            rng.gen_range(0.4..0.6),
        ];
        Texture { waves, base }
    }

    /// RGB texture value at a continuous point; stays inside `[0, 1]`.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut v = self.base;
        for wv in &self.waves {
            let s = wv.amplitude * (2.0 * PI * (wv.freq[0] * x + wv.freq[1] * y) + wv.phase).sin();
            for (c, col) in v.iter_mut().zip(wv.color) {
                *c += s * col;
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub motion: Motion,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SceneVideo {
    /// `[frames, h, w, 3]` in `[0, 1]`.
    pub hq: FrameStack,
    /// `[frames - 1, h, w, 2]`; pair `t` maps frame `t` pixels into frame `t + 1`.
    pub flow: FrameStack,
}

/// Renders a scene. Warping frame `t + 1` by `flow[t]` reconstructs frame `t`.
pub fn generate_scene(scene: &SyntheticScene) -> Result<SceneVideo> {
    let (h, w, n) = (scene.height, scene.width, scene.frames);
    if h < 16 || w < 16 || n < 2 {
        return Err(Error::Data(format!("scene too small: {n} frames of {h}x{w}")));
    }
    let mut rng = stream(scene.seed, "texture", 0);
    let texture = Texture::random(&mut rng);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let step = step_transform(scene.motion, cx, cy);

    // transforms[t] maps texture coordinates to frame-t coordinates.
    let mut transforms = Vec::with_capacity(n);
    let mut m = Affine::IDENTITY;
    for _ in 0..n {
        transforms.push(m);
        m = step.then_after(&m);
    }

    let frame_len = h * w * 3;
    let mut hq = vec![0.0; n * frame_len];
    for (t, tr) in transforms.iter().enumerate() {
        let inv = tr.inverse();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = inv.apply(x as f64, y as f64);
                let o = t * frame_len + (y * w + x) * 3;
                for (dst, val) in hq[o..o + 3].iter_mut().zip(texture.sample(u, v)) {
                    *dst = val.clamp(0.0, 1.0);
                }
            }
        }
    }

    // Consecutive frames are related by the same step transform.
    let mut flow = vec![0.0; (n - 1) * h * w * 2];
    for t in 0..n - 1 {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = step.apply(x as f64, y as f64);
                let o = (t * h * w + y * w + x) * 2;
                flow[o] = px - x as f64;
                flow[o + 1] = py - y as f64;
            }
        }
    }
    Ok(SceneVideo {
        hq: Tensor::new(vec![n, h, w, 3], hq)?,
        flow: Tensor::new(vec![n - 1, h, w, 2], flow)?,
    })
}
