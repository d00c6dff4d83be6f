//! Attention memory cache: a fixed `l × h × w × d` feature memory carried
//! across segments.
//!
//! Queries reuse the temporal-attention projections of the hosting block;
//! updates blend temporally pooled features in through a sigmoid gate.

use std::io::{Read, Write};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::dta::Dta;
use crate::error::{Error, Result};
use crate::nn::{attention, split_heads};
use crate::param::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const SNAPSHOT_MAGIC: u64 = u64::from_le_bytes(*b"LVSRCACH");
pub const SNAPSHOT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryCache {
    slots: Tensor,
    block_id: usize,
    initialized: bool,
}

impl MemoryCache {
    /// An all-zero cache; this is the state before the first segment.
    pub fn zeros(len: usize, h: usize, w: usize, d: usize, block_id: usize) -> Self {
        MemoryCache {
            slots: Tensor::zeros(vec![len, h, w, d]),
            block_id,
            initialized: false,
        }
    }

    pub fn from_slots(slots: Tensor, block_id: usize) -> Result<Self> {
        if slots.rank() != 4 {
            return Err(Error::shape("memory cache", slots.shape(), &[0, 0, 0, 0]));
        }
        Ok(MemoryCache {
            slots,
            block_id,
            initialized: true,
        })
    }

    /// Replaces the slots; the shape may not change.
    pub fn store(&mut self, slots: Tensor) -> Result<()> {
        if slots.shape() != self.slots.shape() {
            return Err(Error::shape("memory cache", self.slots.shape(), slots.shape()));
        }
        self.slots = slots;
        self.initialized = true;
        Ok(())
    }

    pub fn slots(&self) -> &Tensor {
        &self.slots
    }

    pub fn block_id(&self) -> usize {
        self.block_id
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn len(&self) -> usize {
        self.slots.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `l·h·w·d·8`.
    pub fn byte_size(&self) -> usize {
        self.slots.byte_size()
    }

    /// Snapshot layout: eight little-endian `u64` header words
    /// (magic, version, l, h, w, d, block id, reserved) followed by the
    /// slots as little-endian `f64` in row-major order.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let s = self.slots.shape();
        let header = [
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            s[0] as u64,
            s[1] as u64,
            s[2] as u64,
            s[3] as u64,
            self.block_id as u64,
            0,
        ];
        for word in header {
            out.write_all(&word.to_le_bytes())?;
        }
        for v in self.slots.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u64; 8];
        let mut buf = [0u8; 8];
        for word in header.iter_mut() {
            input.read_exact(&mut buf)?;
            *word = u64::from_le_bytes(buf);
        }
        if header[0] != SNAPSHOT_MAGIC {
            return Err(Error::Data("not a cache snapshot".into()));
        }
        if header[1] != SNAPSHOT_VERSION {
            return Err(Error::Version(format!(
                "cache snapshot version {} (expected {SNAPSHOT_VERSION})",
                header[1]
            )));
        }
        let shape: Vec<usize> = header[2..6].iter().map(|&v| v as usize).collect();
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        MemoryCache::from_slots(Tensor::new(shape, data)?, header[6] as usize)
    }
}

#[derive(Clone, Debug)]
pub struct GateParams {
    /// `2d × d`, applied to `[pooled, cache]` along channels.
    pub w_gate: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Amc {
    pub cache_len: usize,
    pub feature_dim: usize,
    pub num_heads: usize,
    pub gate: GateParams,
    /// Scalar weight of the queried tokens in the residual fusion, starts at 0.
    pub fuse_scale: ParamId,
}

impl Amc {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cache_len: usize,
        feature_dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if cache_len == 0 {
            return Err(Error::Config("cache length must be at least 1".into()));
        }
        let d = feature_dim;
        let w_gate = store.add(format!("{name}.w_gate"), xavier_uniform(vec![2 * d, d], 2 * d, d, rng))?;
        let bias = store.add(format!("{name}.gate_bias"), Tensor::zeros(vec![d]))?;
        let fuse_scale = store.add(format!("{name}.fuse_scale"), Tensor::scalar(0.0))?;
        Ok(Amc {
            cache_len,
            feature_dim,
            num_heads,
            gate: GateParams { w_gate, bias },
            fuse_scale,
        })
    }

    pub fn param_count(feature_dim: usize) -> usize {
        2 * feature_dim * feature_dim + feature_dim + 1
    }

    pub fn empty_cache(&self, h: usize, w: usize, block_id: usize) -> MemoryCache {
        MemoryCache::zeros(self.cache_len, h, w, self.feature_dim, block_id)
    }

    /// Cross-attention from every token of `f_out` to the `l` cache slots at the
    /// same location, with `dta`'s projections. Returns the unfused result
    /// `[n, h, w, d]`.
    pub fn query(&self, g: &mut Graph, store: &ParamStore, dta: &Dta, f_out: Var, cache: Var) -> Result<Var> {
        let fs = g.shape(f_out).to_vec();
        let cs = g.shape(cache).to_vec();
        if fs.len() != 4 || cs.len() != 4 || fs[1..] != cs[1..] || cs[3] != self.feature_dim {
            return Err(Error::shape("cache_query", &fs, &cs));
        }
        let (n, h, w, d) = (fs[0], fs[1], fs[2], fs[3]);
        let l = cs[0];
        let heads = self.num_heads;
        let dh = d / heads;
        let wq = g.param(store, dta.w_q);
        let wk = g.param(store, dta.w_k);
        let wv = g.param(store, dta.w_v);
        let q = g.matmul(f_out, wq)?;
        let k = g.matmul(cache, wk)?;
        let v = g.matmul(cache, wv)?;
        let cols = |g: &mut Graph, t: Var, len: usize| -> Result<Var> {
            let t = split_heads(g, t, heads)?;
            let t = g.permute(t, &[0, 2, 3, 1, 4])?;
            g.reshape(t, vec![heads * h * w, len, dh])
        };
        let q = cols(g, q, n)?;
        let k = cols(g, k, l)?;
        let v = cols(g, v, l)?;
        let (o, _) = attention(g, q, k, v)?;
        let o = g.reshape(o, vec![heads, h, w, n, dh])?;
        let o = g.permute(o, &[3, 1, 2, 0, 4])?;
        g.reshape(o, vec![n, h, w, d])
    }

    /// `f_out + s · query(f_out, cache)` with the learnable scalar `s`.
    pub fn query_and_fuse(&self, g: &mut Graph, store: &ParamStore, dta: &Dta, f_out: Var, cache: Var) -> Result<Var> {
        let q = self.query(g, store, dta, f_out, cache)?;
        let s = g.param(store, self.fuse_scale);
        let q = g.scale_by(q, s)?;
        g.add(f_out, q)
    }

    /// Gated update: `g = σ([pool(F), C]·W + b)`, `C' = (1 − g)⊙C + g⊙pool(F)`.
    pub fn update(&self, g: &mut Graph, store: &ParamStore, features: Var, cache: Var) -> Result<Var> {
        let n = g.shape(features)[0];
        let l = g.shape(cache)[0];
        if n < l {
            return Err(Error::Config(format!(
                "segment of {n} frames cannot fill a cache of length {l}"
            )));
        }
        let pooled = g.mean_pool_temporal(features, l)?;
        if g.shape(pooled) != g.shape(cache) {
            return Err(Error::shape("cache_update", g.shape(pooled), g.shape(cache)));
        }
        let gate = self.gate_values(g, store, pooled, cache)?;
        let keep = g.scale(gate, -1.0);
        let keep = g.add_scalar(keep, 1.0);
        let old = g.mul(keep, cache)?;
        let new = g.mul(gate, pooled)?;
        let out = g.add(old, new)?;
        g.check_finite(out, "amc.update")?;
        Ok(out)
    }

    /// The gate `σ([pooled, cache]·W + b)`, one value per slot, position and channel.
    pub fn gate_values(&self, g: &mut Graph, store: &ParamStore, pooled: Var, cache: Var) -> Result<Var> {
        let cat = g.concat(&[pooled, cache], 3)?;
        let w = g.param(store, self.gate.w_gate);
        let b = g.param(store, self.gate.bias);
        let z = g.matmul(cat, w)?;
        let z = g.add_last(z, b)?;
        Ok(g.sigmoid(z))
    }
}
