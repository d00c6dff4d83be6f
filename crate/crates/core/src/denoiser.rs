//! Patch-token noise predictor with spatial self-attention in every block and
//! temporal attention plus memory cache in every `interval`-th block.
//!
//! Conditioning on the low-quality video is by channel concatenation with the
//! noisy input; the timestep drives a per-block scale/shift of the normalised
//! activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::amc::{Amc, MemoryCache};
use crate::autodiff::{Graph, Var};
use crate::dta::{Dta, DtaConfig, TemporalMode};
use crate::error::{Error, Result};
use crate::nn::{attention, position_table, sinusoidal_embedding, FeedForward, Linear, NORM_EPS};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// Upsampled low-quality frames concatenated with the noisy input.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Temporal modules sit in blocks where `index % interval == interval - 1`.
    /// `None` disables them.
    pub dta_block_interval: Option<usize>,
    pub temporal_mode: TemporalMode,
    pub amc: bool,
    pub cache_len: usize,
    pub rope: bool,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub segment_length: usize,
    pub condition: ConditionMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            blocks: 6,
            dim: 64,
            heads: 4,
            patch_size: 2,
            dta_block_interval: Some(3),
            temporal_mode: TemporalMode::Dynamic,
            amc: true,
            cache_len: 2,
            rope: true,
            image_height: 32,
            image_width: 32,
            channels: 3,
            segment_length: 8,
            condition: ConditionMode::Concat,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.dim == 0 {
            return Err(Error::Config(
                "model needs at least one block and a non-zero width".into(),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide {}x{}",
                self.patch_size, self.image_height, self.image_width
            )));
        }
        if self.dta_block_interval == Some(0) {
            return Err(Error::Config("block interval must be at least 1".into()));
        }
        if self.amc && self.cache_len == 0 {
            return Err(Error::Config("cache length must be at least 1".into()));
        }
        if self.amc && self.cache_len > self.segment_length {
            return Err(Error::Config(format!(
                "cache length {} exceeds segment length {}",
                self.cache_len, self.segment_length
            )));
        }
        self.dta_config().validate()
    }

    pub fn dta_config(&self) -> DtaConfig {
        let mut c = DtaConfig::new(self.dim, self.heads, self.segment_length);
        c.rope_enabled = self.rope;
        c.mode = self.temporal_mode;
        c
    }

    pub fn is_temporal_block(&self, index: usize) -> bool {
        self.dta_block_interval.is_some_and(|k| index % k == k - 1)
    }

    pub fn temporal_blocks(&self) -> Vec<usize> {
        (0..self.blocks).filter(|&b| self.is_temporal_block(b)).collect()
    }

    /// Blocks that own a memory cache.
    pub fn cache_blocks(&self) -> Vec<usize> {
        if self.amc {
            self.temporal_blocks()
        } else {
            Vec::new()
        }
    }

    /// Token grid for an image of `h × w` pixels.
    pub fn token_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.patch_size, w / self.patch_size)
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let p2 = self.patch_size * self.patch_size;
        let c = self.channels;
        let mut total = 2 * c * p2 * d + d; // patch embedding
        total += 2 * (d * d + d); // timestep MLP
        let block = (2 * d * d + 2 * d) + 3 * d * d + (d * d + d) + FeedForward::param_count(d);
        total += self.blocks * block;
        let temporal = self.temporal_blocks().len();
        total += temporal * self.dta_config().param_count();
        if self.amc {
            total += temporal * Amc::param_count(d);
        }
        total += (2 * d * d + 2 * d) + (d * p2 * c + p2 * c); // final layer
        total
    }
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    temporal: Option<(Dta, Option<Amc>)>,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    patch_embed: Linear,
    t_fc1: Linear,
    t_fc2: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    final_proj: Linear,
}

/// Graph handles produced by one denoiser pass.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub noise: Var,
    /// Updated cache of each cache-hosting block, in block order.
    pub caches: Vec<Var>,
    /// Temporal attention score entries evaluated, summed over blocks.
    pub temporal_score_entries: usize,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let p2 = config.patch_size * config.patch_size;
        let c = config.channels;
        let patch_embed = Linear::new(store, rng, "embed.patch", 2 * c * p2, d, true)?;
        let t_fc1 = Linear::new(store, rng, "embed.t.fc1", d, d, true)?;
        let t_fc2 = Linear::new(store, rng, "embed.t.fc2", d, d, true)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let name = format!("block{b}");
            let modulation = Linear::zeros(store, &format!("{name}.modulation"), d, 2 * d)?;
            let qkv = Linear::new(store, rng, &format!("{name}.attn.qkv"), d, 3 * d, false)?;
            let proj = Linear::new(store, rng, &format!("{name}.attn.proj"), d, d, true)?;
            let temporal = if config.is_temporal_block(b) {
                let dta = Dta::new(store, rng, &format!("{name}.dta"), config.dta_config())?;
                let amc = if config.amc {
                    Some(Amc::new(
                        store,
                        rng,
                        &format!("{name}.amc"),
                        config.cache_len,
                        d,
                        config.heads,
                    )?)
                } else {
                    None
                };
                Some((dta, amc))
            } else {
                None
            };
            let ffn = FeedForward::new(store, rng, &format!("{name}.ffn"), d)?;
            blocks.push(Block {
                modulation,
                qkv,
                proj,
                temporal,
                ffn,
            });
        }
        let final_modulation = Linear::zeros(store, "final.modulation", d, 2 * d)?;
        let final_proj = Linear::zeros(store, "final.proj", d, p2 * c)?;
        Ok(Denoiser {
            config,
            patch_embed,
            t_fc1,
            t_fc2,
            blocks,
            final_modulation,
            final_proj,
        })
    }

    /// DTA module of each temporal block, in block order.
    pub fn temporal_modules(&self) -> Vec<&Dta> {
        self.blocks
            .iter()
            .filter_map(|b| b.temporal.as_ref().map(|(d, _)| d))
            .collect()
    }

    pub fn cache_modules(&self) -> Vec<&Amc> {
        self.blocks
            .iter()
            .filter_map(|b| b.temporal.as_ref().and_then(|(_, a)| a.as_ref()))
            .collect()
    }

    /// Zero caches sized for frames of `h × w` pixels.
    pub fn empty_caches(&self, h: usize, w: usize) -> Vec<MemoryCache> {
        let (th, tw) = self.config.token_grid(h, w);
        self.config
            .cache_blocks()
            .into_iter()
            .map(|b| MemoryCache::zeros(self.config.cache_len, th, tw, self.config.dim, b))
            .collect()
    }

    fn modulate(&self, g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let h = g.layer_norm(x, NORM_EPS);
        let s = g.add_scalar(scale, 1.0);
        let h = g.mul_last(h, s)?;
        g.add_last(h, shift)
    }

    fn shift_scale(&self, g: &mut Graph, store: &ParamStore, layer: &Linear, temb: Var) -> Result<(Var, Var)> {
        let d = self.config.dim;
        let m = layer.forward(g, store, temb)?;
        let m = g.reshape(m, vec![2 * d])?;
        Ok((g.slice(m, 0, 0, d)?, g.slice(m, 0, d, d)?))
    }

    fn spatial_attention(&self, g: &mut Graph, store: &ParamStore, block: &Block, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
        let heads = self.config.heads;
        let dh = d / heads;
        let qkv = block.qkv.forward(g, store, x)?;
        let mut parts = Vec::with_capacity(3);
        for k in 0..3 {
            let t = g.slice(qkv, 3, k * d, d)?;
            let t = g.reshape(t, vec![n, h * w, heads, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            parts.push(g.reshape(t, vec![n * heads, h * w, dh])?);
        }
        let (o, _) = attention(g, parts[0], parts[1], parts[2])?;
        let o = g.reshape(o, vec![n, heads, h * w, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, vec![n, h, w, d])?;
        block.proj.forward(g, store, o)
    }

    /// Predicts the noise in `z_t[n, H, W, c]` at step `t` given the upsampled
    /// low-quality frames `cond`. `caches` holds one `[l, h, w, d]` tensor per
    /// cache-hosting block.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_t: Var,
        t: usize,
        cond: Var,
        caches: &[Var],
    ) -> Result<DenoiserOutput> {
        let cfg = &self.config;
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 4 || zs[3] != cfg.channels {
            return Err(Error::shape("denoise input", &zs, &[cfg.channels]));
        }
        if g.shape(cond) != zs.as_slice() {
            return Err(Error::shape("denoise condition", &zs, g.shape(cond)));
        }
        let (n, ih, iw, c) = (zs[0], zs[1], zs[2], zs[3]);
        let p = cfg.patch_size;
        if ih % p != 0 || iw % p != 0 {
            return Err(Error::shape("patchify", &zs, &[p, p]));
        }
        let (h, w) = (ih / p, iw / p);
        let d = cfg.dim;
        let n_caches = cfg.cache_blocks().len();
        if caches.len() != n_caches {
            return Err(Error::Config(format!(
                "expected {n_caches} caches, got {}",
                caches.len()
            )));
        }

        let x = g.concat(&[z_t, cond], 3)?;
        let x = g.reshape(x, vec![n, h, p, w, p, 2 * c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = g.reshape(x, vec![n, h, w, p * p * 2 * c])?;
        let x = self.patch_embed.forward(g, store, x)?;
        let pos = g.constant(position_table(h, w, d));
        let pos = g.expand(pos, 0, n)?;
        let mut x = g.add(x, pos)?;

        let temb = g.constant(sinusoidal_embedding(t as f64, d).reshape(vec![1, d])?);
        let temb = self.t_fc1.forward(g, store, temb)?;
        let temb = g.silu(temb);
        let temb = self.t_fc2.forward(g, store, temb)?;
        let temb = g.silu(temb);

        let mut new_caches = Vec::with_capacity(n_caches);
        let mut cache_iter = caches.iter();
        let mut score_entries = 0;
        for (bi, block) in self.blocks.iter().enumerate() {
            let (shift, scale) = self.shift_scale(g, store, &block.modulation, temb)?;
            let hmod = self.modulate(g, x, shift, scale)?;
            let a = self.spatial_attention(g, store, block, hmod)?;
            x = g.add(x, a)?;
            if let Some((dta, amc)) = &block.temporal {
                let out = dta.forward_segment(g, store, x)?;
                score_entries += out.score_entries;
                x = out.features;
                if let Some(amc) = amc {
                    let cache = *cache_iter.next().expect("cache count checked");
                    let fused = amc.query_and_fuse(g, store, dta, x, cache)?;
                    new_caches.push(amc.update(g, store, x, cache)?);
                    x = fused;
                }
            }
            let hmod = self.modulate(g, x, shift, scale)?;
            let f = block.ffn.forward(g, store, hmod)?;
            x = g.add(x, f)?;
            g.check_finite(x, &format!("block{bi}"))?;
        }

        let (shift, scale) = self.shift_scale(g, store, &self.final_modulation, temb)?;
        let hmod = self.modulate(g, x, shift, scale)?;
        let y = self.final_proj.forward(g, store, hmod)?;
        let y = g.reshape(y, vec![n, h, w, p, p, c])?;
        let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let noise = g.reshape(y, vec![n, ih, iw, c])?;
        Ok(DenoiserOutput {
            noise,
            caches: new_caches,
            temporal_score_entries: score_entries,
        })
    }

    /// Gradient-free evaluation on plain tensors.
    pub fn denoise(
        &self,
        store: &ParamStore,
        z_t: &Tensor,
        t: usize,
        cond: &Tensor,
        caches: &[MemoryCache],
    ) -> Result<(Tensor, Vec<MemoryCache>)> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let c = g.constant(cond.clone());
        let cs: Vec<Var> = caches.iter().map(|m| g.constant(m.slots().clone())).collect();
        let out = self.forward(&mut g, store, z, t, c, &cs)?;
        let updated = out
            .caches
            .iter()
            .zip(caches)
            .map(|(&v, old)| MemoryCache::from_slots(g.value(v).clone(), old.block_id()))
            .collect::<Result<Vec<_>>>()?;
        Ok((g.value(out.noise).clone(), updated))
    }
}
