//! Dynamic temporal attention.
//!
//! For every reference frame `i` and head, a small convolutional network
//! reads the reference queries next to each frame's keys and predicts a
//! per-token displacement. Keys and values of every frame are resampled along
//! that displacement, and each spatial location then attends over the `n`
//! aligned tokens of its own column. Score matrices therefore hold
//! `h·w·n²` entries per head instead of `(h·w·n)²`.
//!
//! [`TemporalMode::Plain`] skips the flow network and attends over co-located
//! tokens; with a zero flow the two modes coincide.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{attention, split_heads, FeedForward, NORM_EPS};
use crate::param::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    /// Co-located temporal attention, no alignment.
    Plain,
    /// Flow-warped keys and values.
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtaConfig {
    pub num_heads: usize,
    pub feature_dim: usize,
    /// Hidden widths of the 3×3 flow-network layers.
    pub flow_net_channels: Vec<usize>,
    pub segment_length: usize,
    pub rope_enabled: bool,
    pub mode: TemporalMode,
}

impl DtaConfig {
    pub fn new(feature_dim: usize, num_heads: usize, segment_length: usize) -> Self {
        let dh = feature_dim / num_heads.max(1);
        DtaConfig {
            num_heads,
            feature_dim,
            flow_net_channels: vec![dh, dh],
            segment_length,
            rope_enabled: true,
            mode: TemporalMode::Dynamic,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.feature_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "feature dim {} is not divisible by {} heads",
                self.feature_dim, self.num_heads
            )));
        }
        if self.segment_length == 0 {
            return Err(Error::Config("segment length must be at least 1".into()));
        }
        if self.rope_enabled && self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary embedding needs an even head dim".into()));
        }
        Ok(())
    }

    /// Score-matrix entries of one segment's temporal attention.
    pub fn score_entries(&self, h: usize, w: usize, n: usize) -> usize {
        h * w * n * n * self.num_heads
    }

    /// Score-matrix entries of full spatio-temporal attention on the same segment.
    pub fn full_attention_score_entries(&self, h: usize, w: usize, n: usize) -> usize {
        (h * w * n) * (h * w * n) * self.num_heads
    }

    pub fn param_count(&self) -> usize {
        let d = self.feature_dim;
        let mut count = 3 * d * d + FeedForward::param_count(d);
        if self.mode == TemporalMode::Dynamic {
            let mut cin = 2 * self.head_dim();
            for &c in &self.flow_net_channels {
                count += 9 * cin * c + c;
                cin = c;
            }
            count += 9 * cin * 2 * self.num_heads + 2 * self.num_heads;
        }
        count
    }
}

/// Convolutional token-flow estimator. The trunk is shared by all heads; the
/// last layer emits two displacement channels per head.
#[derive(Clone, Debug)]
pub struct FlowNet {
    /// `(kernel, bias)` of each 3×3 hidden layer.
    pub hidden: Vec<(ParamId, ParamId)>,
    /// Zero-initialised 3×3 output layer with `2·heads` channels.
    pub output: (ParamId, ParamId),
    pub heads: usize,
}

impl FlowNet {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        heads: usize,
    ) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut cin = in_channels;
        for (k, &c) in channels.iter().enumerate() {
            let kernel = store.add(
                format!("{name}.conv{k}.kernel"),
                xavier_uniform(vec![3, 3, cin, c], 9 * cin, 9 * c, rng),
            )?;
            let bias = store.add(format!("{name}.conv{k}.bias"), Tensor::zeros(vec![c]))?;
            hidden.push((kernel, bias));
            cin = c;
        }
        let output = (
            store.add(format!("{name}.out.kernel"), Tensor::zeros(vec![3, 3, cin, 2 * heads]))?,
            store.add(format!("{name}.out.bias"), Tensor::zeros(vec![2 * heads]))?,
        );
        Ok(FlowNet { hidden, output, heads })
    }

    /// Maps `x[N, h, w, 2·dh]` to all heads' displacements `[N, h, w, 2·heads]`.
    pub fn forward_all(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for &(k, b) in &self.hidden {
            let k = g.param(store, k);
            let b = g.param(store, b);
            h = g.conv2d(h, k)?;
            h = g.add_last(h, b)?;
            h = g.silu(h);
        }
        let k = g.param(store, self.output.0);
        let b = g.param(store, self.output.1);
        let y = g.conv2d(h, k)?;
        g.add_last(y, b)
    }

    /// Displacements of one head for `x[N, h, w, 2·dh]`, `[N, h, w, 2]`.
    pub fn forward_head(&self, g: &mut Graph, store: &ParamStore, x: Var, head: usize) -> Result<Var> {
        let y = self.forward_all(g, store, x)?;
        g.slice(y, 3, 2 * head, 2)
    }

    /// Head-major batch `x[heads·m, h, w, 2·dh]`; block `k` uses head `k`'s channels.
    pub fn forward_heads(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.forward_all(g, store, x)?;
        let s = g.shape(y).to_vec();
        let m = s[0] / self.heads;
        let y = g.reshape(y, vec![self.heads, m, s[1], s[2], s[3]])?;
        let mut parts = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let p = g.slice(y, 0, head, 1)?;
            parts.push(g.slice(p, 4, 2 * head, 2)?);
        }
        let y = g.concat(&parts, 0)?;
        g.reshape(y, vec![s[0], s[1], s[2], 2])
    }
}

/// Graph handles produced by [`Dta::forward_segment`].
#[derive(Clone, Debug)]
pub struct DtaOutput {
    /// `n × h × w × d` features after attention and feed-forward.
    pub features: Var,
    /// Attention weights, `[heads·n·h·w, 1, n]` ordered head, reference, row, column.
    pub attention: Var,
    /// Token flows `[heads·n·n, h, w, 2]` ordered head, reference, frame; `None` in plain mode.
    pub flows: Option<Var>,
    /// Entries in the score matrices evaluated for this segment.
    pub score_entries: usize,
    /// Key/value tokens seen by one query.
    pub kv_tokens_per_query: usize,
}

#[derive(Clone, Debug)]
pub struct Dta {
    pub config: DtaConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub flow_net: Option<FlowNet>,
    pub ffn: FeedForward,
}

impl Dta {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, config: DtaConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let mut proj =
            |tag: &str, rng: &mut R| store.add(format!("{name}.w_{tag}"), xavier_uniform(vec![d, d], d, d, rng));
        let w_q = proj("q", rng)?;
        let w_k = proj("k", rng)?;
        let w_v = proj("v", rng)?;
        let flow_net = match config.mode {
            TemporalMode::Dynamic => Some(FlowNet::new(
                store,
                rng,
                &format!("{name}.flow"),
                2 * config.head_dim(),
                &config.flow_net_channels,
                config.num_heads,
            )?),
            TemporalMode::Plain => None,
        };
        let ffn = FeedForward::new(store, rng, &format!("{name}.ffn"), d)?;
        Ok(Dta {
            config,
            w_q,
            w_k,
            w_v,
            flow_net,
            ffn,
        })
    }

    fn head_weight(&self, g: &mut Graph, store: &ParamStore, w: ParamId, head: usize) -> Result<Var> {
        let dh = self.config.head_dim();
        let w = g.param(store, w);
        g.slice(w, 1, head * dh, dh)
    }

    /// Per-head projections: `Q_i` from frame `i` only (`h×w×dh`), `K`, `V` from
    /// every frame (`n×h×w×dh`).
    pub fn project_qkv(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        head: usize,
        reference: usize,
    ) -> Result<(Var, Var, Var)> {
        let s = g.shape(features).to_vec();
        if head >= self.config.num_heads {
            return Err(Error::Index {
                what: "attention head",
                index: head,
                len: self.config.num_heads,
            });
        }
        if reference >= s[0] {
            return Err(Error::Index {
                what: "reference frame",
                index: reference,
                len: s[0],
            });
        }
        let wq = self.head_weight(g, store, self.w_q, head)?;
        let wk = self.head_weight(g, store, self.w_k, head)?;
        let wv = self.head_weight(g, store, self.w_v, head)?;
        let fi = g.slice(features, 0, reference, 1)?;
        let q = g.matmul(fi, wq)?;
        let q = g.reshape(q, vec![s[1], s[2], self.config.head_dim()])?;
        let k = g.matmul(features, wk)?;
        let v = g.matmul(features, wv)?;
        Ok((q, k, v))
    }

    /// Token flow of one head: the reference query is replicated over the `n`
    /// frames and concatenated with their keys before the conv stack.
    pub fn estimate_flow(&self, g: &mut Graph, store: &ParamStore, q_ref: Var, keys: Var, head: usize) -> Result<Var> {
        let net = self
            .flow_net
            .as_ref()
            .ok_or_else(|| Error::Config("plain temporal attention has no flow network".into()))?;
        let n = g.shape(keys)[0];
        let qs = g.shape(q_ref).to_vec();
        let ks = g.shape(keys).to_vec();
        if ks[1..] != qs[..] {
            return Err(Error::shape("estimate_flow", &qs, &ks));
        }
        let q = g.expand(q_ref, 0, n)?;
        let x = g.concat(&[q, keys], 3)?;
        net.forward_head(g, store, x, head)
    }

    /// Output for reference frame `i` alone, `1 × h × w × d`, computed head by head.
    pub fn forward_reference(&self, g: &mut Graph, store: &ParamStore, features: Var, reference: usize) -> Result<Var> {
        let s = g.shape(features).to_vec();
        let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
        if d != self.config.feature_dim {
            return Err(Error::shape("dta", &s, &[self.config.feature_dim]));
        }
        if reference >= n {
            return Err(Error::Index {
                what: "reference frame",
                index: reference,
                len: n,
            });
        }
        let dh = self.config.head_dim();
        let x = g.layer_norm(features, NORM_EPS);
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for head in 0..self.config.num_heads {
            let (q, k, v) = self.project_qkv(g, store, x, head, reference)?;
            let (k, v) = match self.config.mode {
                TemporalMode::Dynamic => {
                    let flow = self.estimate_flow(g, store, q, k, head)?;
                    (g.bilinear_warp(k, flow)?, g.bilinear_warp(v, flow)?)
                }
                TemporalMode::Plain => (k, v),
            };
            // (hw) × n × dh
            let k = g.permute(k, &[1, 2, 0, 3])?;
            let k = g.reshape(k, vec![h * w, n, dh])?;
            let v = g.permute(v, &[1, 2, 0, 3])?;
            let v = g.reshape(v, vec![h * w, n, dh])?;
            let mut q = g.reshape(q, vec![h * w, 1, dh])?;
            let mut k = k;
            if self.config.rope_enabled {
                q = g.rope(q, &vec![reference as f64; h * w])?;
                let pos: Vec<f64> = (0..h * w * n).map(|r| (r % n) as f64).collect();
                k = g.rope(k, &pos)?;
            }
            let (o, _) = attention(g, q, k, v)?;
            heads.push(g.reshape(o, vec![1, h, w, dh])?);
        }
        let attn = g.concat(&heads, 3)?;
        let fi = g.slice(features, 0, reference, 1)?;
        let y = g.add(fi, attn)?;
        let out = self.feed_forward_residual(g, store, y)?;
        g.check_finite(out, "dta")?;
        Ok(out)
    }

    fn feed_forward_residual(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<Var> {
        let z = g.layer_norm(y, NORM_EPS);
        let z = self.ffn.forward(g, store, z)?;
        g.add(y, z)
    }

    /// All reference frames at once; row `i` equals [`Dta::forward_reference`] for `i`.
    pub fn forward_segment(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<DtaOutput> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 || s[3] != self.config.feature_dim {
            return Err(Error::shape("dta", &s, &[self.config.feature_dim]));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let hw = h * w;

        let x = g.layer_norm(features, NORM_EPS);
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        // [heads, n, h, w, dh]
        let q = split_heads(g, q, heads)?;
        let k = split_heads(g, k, heads)?;
        let v = split_heads(g, v, heads)?;

        let (k_al, v_al, flows) = match self.config.mode {
            TemporalMode::Dynamic => {
                let net = self.flow_net.as_ref().expect("dynamic mode has a flow net");
                // [heads, ref, frame, h, w, dh]
                let k_rep = g.expand(k, 1, n)?;
                let v_rep = g.expand(v, 1, n)?;
                let q_rep = g.expand(q, 2, n)?;
                let inp = g.concat(&[q_rep, k_rep], 5)?;
                let inp = g.reshape(inp, vec![heads * n * n, h, w, 2 * dh])?;
                let flow = net.forward_heads(g, store, inp)?;
                g.check_finite(flow, "dta.flow")?;
                let kf = g.reshape(k_rep, vec![heads * n * n, h, w, dh])?;
                let vf = g.reshape(v_rep, vec![heads * n * n, h, w, dh])?;
                let kw = g.bilinear_warp(kf, flow)?;
                let vw = g.bilinear_warp(vf, flow)?;
                let mut to_cols = |t: Var| -> Result<Var> {
                    let t = g.reshape(t, vec![heads, n, n, h, w, dh])?;
                    let t = g.permute(t, &[0, 1, 3, 4, 2, 5])?;
                    g.reshape(t, vec![heads * n * hw, n, dh])
                };
                (to_cols(kw)?, to_cols(vw)?, Some(flow))
            }
            TemporalMode::Plain => {
                let mut to_cols = |t: Var| -> Result<Var> {
                    let t = g.permute(t, &[0, 2, 3, 1, 4])?;
                    let t = g.expand(t, 1, n)?;
                    g.reshape(t, vec![heads * n * hw, n, dh])
                };
                (to_cols(k)?, to_cols(v)?, None)
            }
        };

        let mut qc = g.reshape(q, vec![heads * n * hw, 1, dh])?;
        let mut kc = k_al;
        if self.config.rope_enabled {
            let qpos: Vec<f64> = (0..heads * n * hw).map(|r| ((r / hw) % n) as f64).collect();
            qc = g.rope(qc, &qpos)?;
            let kpos: Vec<f64> = (0..heads * n * hw * n).map(|r| (r % n) as f64).collect();
            kc = g.rope(kc, &kpos)?;
        }
        let (o, weights) = attention(g, qc, kc, v_al)?;
        let score_entries = g.value(weights).numel();
        let o = g.reshape(o, vec![heads, n, h, w, dh])?;
        let o = g.permute(o, &[1, 2, 3, 0, 4])?;
        let o = g.reshape(o, vec![n, h, w, heads * dh])?;
        let y = g.add(features, o)?;
        let out = self.feed_forward_residual(g, store, y)?;
        g.check_finite(out, "dta")?;
        Ok(DtaOutput {
            features: out,
            attention: weights,
            flows,
            score_entries,
            kv_tokens_per_query: n,
        })
    }
}
