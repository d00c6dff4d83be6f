//! Small layers shared by the temporal modules and the denoiser.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::param::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(vec![fan_in, fan_out], fan_in, fan_out, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// A layer whose weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(vec![fan_in, fan_out]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_last(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer SiLU MLP with a 4× hidden width.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, 4 * dim, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * dim, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn param_count(dim: usize) -> usize {
        2 * 4 * dim * dim + 4 * dim + dim
    }
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(vec![dim], |i| {
        let m = i % half.max(1);
        let freq = (-(10000f64.ln()) * m as f64 / half.max(1) as f64).exp();
        if i < half {
            (t * freq).sin()
        } else if i < 2 * half {
            (t * freq).cos()
        } else {
            0.0
        }
    })
}

/// Fixed 2-D sine–cosine position table of shape `h × w × dim`.
pub fn position_table(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(vec![h, w, dim]);
    for y in 0..h {
        let ey = sinusoidal_embedding(y as f64, half);
        for x in 0..w {
            let ex = sinusoidal_embedding(x as f64, dim - half);
            let base = (y * w + x) * dim;
            let d = out.data_mut();
            d[base..base + half].copy_from_slice(ey.data());
            d[base + half..base + dim].copy_from_slice(ex.data());
        }
    }
    out
}

/// Splits `x[n, h, w, heads·dh]` into `[heads, n, h, w, dh]`.
pub(crate) fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let dh = s[3] / heads;
    let r = g.reshape(x, vec![s[0], s[1], s[2], heads, dh])?;
    g.permute(r, &[3, 0, 1, 2, 4])
}

/// Scaled dot-product attention over batched `q[B, m, dh]`, `k/v[B, l, dh]`.
/// Returns `(output[B, m, dh], weights[B, m, l])`.
pub(crate) fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = *g.shape(q).last().unwrap();
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores);
    let out = g.bmm(weights, v, false)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_steps_embed_distinctly() {
        let a = sinusoidal_embedding(3.0, 16);
        let b = sinusoidal_embedding(4.0, 16);
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn position_table_shape() {
        assert_eq!(position_table(4, 5, 8).shape(), &[4, 5, 8]);
    }
}
