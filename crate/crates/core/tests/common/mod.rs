//! Shared helpers for the integration tests: a central finite-difference
//! checker and element-loop reference implementations of the temporal modules.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segvsr::amc::Amc;
use segvsr::dta::{Dta, TemporalMode};
use segvsr::nn::NORM_EPS;
use segvsr::{Graph, ParamId, ParamStore, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adds `N(0, scale²)` noise to every parameter so zero-initialised layers
/// take part in gradient checks.
pub fn perturb_params(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        let noise = Tensor::randn(p.tensor.shape().to_vec(), &mut r);
        p.tensor = p.tensor.zip_map(&noise, |a, b| a + scale * b).unwrap();
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// What a gradient check probes.
pub struct GradCheck {
    /// Relative error per checked tensor, as `(label, error)`.
    pub errors: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `loss = Σ f(inputs) ⊙ R` with central
/// differences. Every input element is probed; for parameters at most
/// `param_probes` elements per tensor are (chosen by a fixed stream).
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    params: &[ParamId],
    param_probes: usize,
    f: F,
) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, store, &vars).unwrap();
        Tensor::randn(g.value(out).shape().to_vec(), &mut rng(0xfd))
    };
    let loss_of = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, store, &vars).unwrap();
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, store, &vars).unwrap();
    let r = g.constant(weights.clone());
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap();
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    grads.accumulate_into(&mut with_grads);

    let mut errors = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = Vec::with_capacity(input.numel());
        let mut probe = inputs.to_vec();
        for i in 0..input.numel() {
            let x = input.data()[i];
            probe[k].data_mut()[i] = x + FD_STEP;
            let up = loss_of(store, &probe);
            probe[k].data_mut()[i] = x - FD_STEP;
            let down = loss_of(store, &probe);
            probe[k].data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        errors.push((format!("input{k}"), rel_err(&analytic, &numeric)));
    }

    let mut pick = rng(0x9e);
    for &id in params {
        let p = with_grads.get(id);
        let numel = p.tensor.numel();
        let grad = p
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()));
        let idx: Vec<usize> = if numel <= param_probes {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut pick, numel, param_probes).into_vec()
        };
        let mut probe = store.clone();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &idx {
            let x = store.value(id).data()[i];
            probe.get_mut(id).tensor.data_mut()[i] = x + FD_STEP;
            let up = loss_of(&probe, inputs);
            probe.get_mut(id).tensor.data_mut()[i] = x - FD_STEP;
            let down = loss_of(&probe, inputs);
            probe.get_mut(id).tensor.data_mut()[i] = x;
            analytic.push(grad.data()[i]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        errors.push((store.get(id).name.clone(), rel_err(&analytic, &numeric)));
    }
    GradCheck { errors }
}

pub fn all_params(store: &ParamStore) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}

// ---- element-loop references ---------------------------------------------

fn layer_norm_rows(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + NORM_EPS).sqrt()));
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `row · W[.., col]` for a row-major `W[k, m]`.
fn dot_col(row: &[f64], w: &Tensor, col: usize) -> f64 {
    let m = w.dim(1);
    row.iter().enumerate().map(|(r, v)| v * w.data()[r * m + col]).sum()
}

/// Zero-padded 3×3 cross-correlation of one `h × w × cin` image.
fn conv3x3(x: &[f64], h: usize, w: usize, cin: usize, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let cout = k.dim(3);
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for o in 0..cout {
                let mut acc = b.data()[o];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let sy = y as isize + dy as isize - 1;
                        let sx = xx as isize + dx as isize - 1;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for i in 0..cin {
                            let v = x[((sy as usize) * w + sx as usize) * cin + i];
                            acc += v * k.get(&[dy, dx, i, o]);
                        }
                    }
                }
                out[(y * w + xx) * cout + o] = acc;
            }
        }
    }
    out
}

/// Bilinear sample of `img[h, w, c]` at `(sx, sy)` with clamped coordinates.
fn bilinear(img: &[f64], h: usize, w: usize, c: usize, sx: f64, sy: f64, ch: usize) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let at = |yy: f64, xx: f64| {
        let yy = yy.max(0.0).min((h - 1) as f64) as usize;
        let xx = xx.max(0.0).min((w - 1) as f64) as usize;
        img[(yy * w + xx) * c + ch]
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Rotates consecutive channel pairs of `v` by `pos · 10000^(−2m/dim)`.
fn rotate(v: &mut [f64], pos: f64) {
    let dim = v.len();
    for m in 0..dim / 2 {
        let a = pos * 10000f64.powf(-(2.0 * m as f64) / dim as f64);
        let (x0, x1) = (v[2 * m], v[2 * m + 1]);
        v[2 * m] = x0 * a.cos() - x1 * a.sin();
        v[2 * m + 1] = x0 * a.sin() + x1 * a.cos();
    }
}

fn feed_forward_residual(store: &ParamStore, dta: &Dta, y: &[f64], d: usize) -> Vec<f64> {
    let z = layer_norm_rows(y, d);
    let w1 = store.value(dta.ffn.fc1.weight);
    let b1 = store.value(dta.ffn.fc1.bias.unwrap());
    let w2 = store.value(dta.ffn.fc2.weight);
    let b2 = store.value(dta.ffn.fc2.bias.unwrap());
    let hidden = w1.dim(1);
    let mut out = y.to_vec();
    for (r, row) in z.chunks(d).enumerate() {
        let hvec: Vec<f64> = (0..hidden).map(|j| silu(dot_col(row, w1, j) + b1.data()[j])).collect();
        for o in 0..d {
            out[r * d + o] += dot_col(&hvec, w2, o) + b2.data()[o];
        }
    }
    out
}

/// Element-loop temporal attention over `features[n, h, w, d]`. With
/// `force_zero_flow` the flow network is bypassed and every displacement is 0.
pub fn dta_reference(store: &ParamStore, dta: &Dta, features: &Tensor, force_zero_flow: bool) -> Tensor {
    let (n, h, w, d) = (features.dim(0), features.dim(1), features.dim(2), features.dim(3));
    let heads = dta.config.num_heads;
    let dh = d / heads;
    let hw = h * w;
    let x = layer_norm_rows(features.data(), d);
    let (wq, wk, wv) = (store.value(dta.w_q), store.value(dta.w_k), store.value(dta.w_v));
    // proj[frame][pos][channel]
    let project = |wm: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; n * hw * d];
        for r in 0..n * hw {
            for o in 0..d {
                out[r * d + o] = dot_col(&x[r * d..(r + 1) * d], wm, o);
            }
        }
        out
    };
    let (q, k, v) = (project(wq), project(wk), project(wv));
    let head_img = |t: &[f64], frame: usize, head: usize| -> Vec<f64> {
        let mut img = Vec::with_capacity(hw * dh);
        for p in 0..hw {
            let base = (frame * hw + p) * d + head * dh;
            img.extend_from_slice(&t[base..base + dh]);
        }
        img
    };
    let use_flow = dta.config.mode == TemporalMode::Dynamic && !force_zero_flow;

    let mut attn = vec![0.0; n * hw * d];
    for head in 0..heads {
        for i in 0..n {
            let qi = head_img(&q, i, head);
            // Aligned keys and values of every frame, [frame][pos][dh].
            let mut ka = Vec::with_capacity(n);
            let mut va = Vec::with_capacity(n);
            for j in 0..n {
                let kj = head_img(&k, j, head);
                let vj = head_img(&v, j, head);
                if !use_flow {
                    ka.push(kj);
                    va.push(vj);
                    continue;
                }
                let net = dta.flow_net.as_ref().unwrap();
                let mut inp = Vec::with_capacity(hw * 2 * dh);
                for p in 0..hw {
                    inp.extend_from_slice(&qi[p * dh..(p + 1) * dh]);
                    inp.extend_from_slice(&kj[p * dh..(p + 1) * dh]);
                }
                let mut cin = 2 * dh;
                for &(kid, bid) in &net.hidden {
                    let kt = store.value(kid);
                    inp = conv3x3(&inp, h, w, cin, kt, store.value(bid))
                        .into_iter()
                        .map(silu)
                        .collect();
                    cin = kt.dim(3);
                }
                let all = conv3x3(&inp, h, w, cin, store.value(net.output.0), store.value(net.output.1));
                let mut kw = vec![0.0; hw * dh];
                let mut vw = vec![0.0; hw * dh];
                for y in 0..h {
                    for xx in 0..w {
                        let p = y * w + xx;
                        let fx = all[p * 2 * heads + 2 * head];
                        let fy = all[p * 2 * heads + 2 * head + 1];
                        let (sx, sy) = (xx as f64 + fx, y as f64 + fy);
                        for c in 0..dh {
                            kw[p * dh + c] = bilinear(&kj, h, w, dh, sx, sy, c);
                            vw[p * dh + c] = bilinear(&vj, h, w, dh, sx, sy, c);
                        }
                    }
                }
                ka.push(kw);
                va.push(vw);
            }
            for p in 0..hw {
                let mut qv = qi[p * dh..(p + 1) * dh].to_vec();
                if dta.config.rope_enabled {
                    rotate(&mut qv, i as f64);
                }
                let mut scores = Vec::with_capacity(n);
                for (j, kj) in ka.iter().enumerate() {
                    let mut kv = kj[p * dh..(p + 1) * dh].to_vec();
                    if dta.config.rope_enabled {
                        rotate(&mut kv, j as f64);
                    }
                    let s: f64 = qv.iter().zip(&kv).map(|(a, b)| a * b).sum();
                    scores.push(s / (dh as f64).sqrt());
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let o: f64 = (0..n).map(|j| e[j] / z * va[j][p * dh + c]).sum();
                    attn[(i * hw + p) * d + head * dh + c] = o;
                }
            }
        }
    }
    let y: Vec<f64> = features.data().iter().zip(&attn).map(|(a, b)| a + b).collect();
    Tensor::new(vec![n, h, w, d], feed_forward_residual(store, dta, &y, d)).unwrap()
}

/// Element-loop cache read: every token of `f_out[n, h, w, d]` attends over
/// the `l` slots stored at its own position.
pub fn amc_query_reference(store: &ParamStore, dta: &Dta, heads: usize, f_out: &Tensor, cache: &Tensor) -> Tensor {
    let (n, h, w, d) = (f_out.dim(0), f_out.dim(1), f_out.dim(2), f_out.dim(3));
    let l = cache.dim(0);
    let dh = d / heads;
    let hw = h * w;
    let (wq, wk, wv) = (store.value(dta.w_q), store.value(dta.w_k), store.value(dta.w_v));
    let mut out = Tensor::zeros(vec![n, h, w, d]);
    for p in 0..hw {
        for head in 0..heads {
            let col = |src: &Tensor, frame: usize, wm: &Tensor| -> Vec<f64> {
                let row = &src.data()[(frame * hw + p) * d..(frame * hw + p + 1) * d];
                (0..dh).map(|c| dot_col(row, wm, head * dh + c)).collect()
            };
            let keys: Vec<Vec<f64>> = (0..l).map(|s| col(cache, s, wk)).collect();
            let vals: Vec<Vec<f64>> = (0..l).map(|s| col(cache, s, wv)).collect();
            for f in 0..n {
                let qv = col(f_out, f, wq);
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|kv| qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let o: f64 = (0..l).map(|s| e[s] / z * vals[s][c]).sum();
                    out.data_mut()[(f * hw + p) * d + head * dh + c] = o;
                }
            }
        }
    }
    out
}

/// Element-loop gated cache update from `features[n, h, w, d]`.
pub fn amc_update_reference(store: &ParamStore, amc: &Amc, features: &Tensor, cache: &Tensor) -> Tensor {
    let (n, h, w, d) = (features.dim(0), features.dim(1), features.dim(2), features.dim(3));
    let l = cache.dim(0);
    let wg = store.value(amc.gate.w_gate);
    let bg = store.value(amc.gate.bias);
    let base = n / l;
    let mut out = Tensor::zeros(cache.shape().to_vec());
    for s in 0..l {
        let lo = s * base;
        let hi = if s + 1 == l { n } else { lo + base };
        for y in 0..h {
            for x in 0..w {
                let pooled: Vec<f64> = (0..d)
                    .map(|c| (lo..hi).map(|f| features.get(&[f, y, x, c])).sum::<f64>() / (hi - lo) as f64)
                    .collect();
                let old: Vec<f64> = (0..d).map(|c| cache.get(&[s, y, x, c])).collect();
                let cat: Vec<f64> = pooled.iter().chain(&old).cloned().collect();
                for c in 0..d {
                    let gate = sigmoid(dot_col(&cat, wg, c) + bg.data()[c]);
                    out.set(&[s, y, x, c], (1.0 - gate) * old[c] + gate * pooled[c]);
                }
            }
        }
    }
    out
}
