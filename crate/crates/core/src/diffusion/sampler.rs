use serde::{Deserialize, Serialize};

use crate::amc::MemoryCache;
use crate::denoiser::Denoiser;
use crate::diffusion::color::color_correct;
use crate::diffusion::plan::SegmentPlan;
use crate::diffusion::schedule::{ddim_step, NoiseSchedule};
use crate::diffusion::training::{from_model_space, to_model_space};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng::stream;
use crate::tensor::{FrameStack, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Deterministic DDIM (η = 0).
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub kind: SamplerKind,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 15,
            kind: SamplerKind::Ddim,
            seed: 0,
        }
    }
}

/// How a segment reads the caches left by the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Every step reads the caches exported at the previous segment's final
    /// step; one set per hosting block is retained.
    LastStep,
    /// Step `k` reads the caches the previous segment produced at its step
    /// `k`; one set per step is retained.
    Synchronized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub cache_mode: CacheMode,
    /// Run the memory cache at all. When off, segments are independent.
    pub use_cache: bool,
    pub color_correct: bool,
    /// Keep the exported caches of every segment in the report.
    pub keep_cache_dumps: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            cache_mode: CacheMode::LastStep,
            use_cache: true,
            color_correct: true,
            keep_cache_dumps: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleReport {
    /// Restored video in `[0, 1]`.
    pub video: FrameStack,
    /// Per-segment outputs in `[0, 1]` before blending, padding trimmed.
    pub segment_outputs: Vec<FrameStack>,
    /// Largest number of cache bytes held between denoiser calls.
    pub peak_cache_bytes: usize,
    /// Largest number of retained cache sets (one set = one cache per hosting block).
    pub peak_cache_sets: usize,
    /// Caches exported after each segment, when requested.
    pub cache_dumps: Vec<Vec<MemoryCache>>,
}

/// Initial noise of segment `k`.
pub fn segment_noise(seed: u64, k: usize, shape: &[usize]) -> Tensor {
    let mut rng = stream(seed, "segment-noise", k as u64);
    Tensor::randn(shape.to_vec(), &mut rng)
}

/// Full DDIM trajectory for one segment with cache reads supplied per step.
/// Returns the clean estimate in model space and the caches produced at each
/// step (empty when the model has no cache).
fn sample_segment(
    model: &Denoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    x_t: Tensor,
    cond: &Tensor,
    mut caches_for_step: impl FnMut(usize) -> Vec<MemoryCache>,
    mut on_step_caches: impl FnMut(usize, Vec<MemoryCache>),
) -> Result<Tensor> {
    let mut x = x_t;
    for (k, &t) in timesteps.iter().enumerate() {
        let caches = caches_for_step(k);
        let (eps, updated) = model.denoise(store, &x, t, cond, &caches)?;
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match timesteps.get(k + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        x = ddim_step(&x, &eps, ab, ab_prev)?;
        on_step_caches(k, updated);
    }
    if !x.is_finite() {
        return Err(Error::Numeric("sampler".into()));
    }
    Ok(x)
}

/// Plain DDIM sampling of one segment from `x_t` with zero caches.
pub fn ddim_sample(
    model: &Denoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    steps: usize,
    x_t: Tensor,
    cond: &Tensor,
) -> Result<Tensor> {
    let timesteps = schedule.sampling_timesteps(steps)?;
    let zero = model.empty_caches(cond.dim(1), cond.dim(2));
    sample_segment(
        model,
        store,
        schedule,
        &timesteps,
        x_t,
        cond,
        |_| zero.clone(),
        |_, _| {},
    )
}

/// Restores a video segment by segment. `cond` is the upsampled low-quality
/// video in `[0, 1]`.
pub fn sample_segmentwise(
    model: &Denoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cond: &FrameStack,
    plan: &SegmentPlan,
    sampler: &SamplerConfig,
    options: &SampleOptions,
) -> Result<SampleReport> {
    if cond.rank() != 4 || cond.dim(0) != plan.total_frames {
        return Err(Error::shape("sample_segmentwise", cond.shape(), &[plan.total_frames]));
    }
    if plan.segment_len != model.config.segment_length {
        return Err(Error::Config(format!(
            "plan segment length {} differs from model segment length {}",
            plan.segment_len, model.config.segment_length
        )));
    }
    let timesteps = schedule.sampling_timesteps(sampler.steps)?;
    let (n, h, w, c) = (plan.segment_len, cond.dim(1), cond.dim(2), cond.dim(3));
    let zero = model.empty_caches(h, w);
    let use_cache = options.use_cache && !zero.is_empty();
    let set_bytes: usize = zero.iter().map(MemoryCache::byte_size).sum();

    // Caches retained from the previous segment, one entry per step read.
    let mut retained: Vec<Vec<MemoryCache>> = Vec::new();
    let mut peak_sets = 0;
    let mut cache_dumps = Vec::new();
    let mut segment_outputs = Vec::with_capacity(plan.len());

    for k in 0..plan.len() {
        let frames: Vec<Tensor> = plan
            .frame_indices(k)
            .into_iter()
            .map(|i| cond.frame(i))
            .collect::<Result<_>>()?;
        let seg_cond = to_model_space(&Tensor::cat_frames(&frames)?);
        let x_t = segment_noise(sampler.seed, k, &[n, h, w, c]);
        let mut produced: Vec<Vec<MemoryCache>> = Vec::new();
        let x0 = sample_segment(
            model,
            store,
            schedule,
            &timesteps,
            x_t,
            &seg_cond,
            |step| {
                if !use_cache || retained.is_empty() {
                    return zero.clone();
                }
                match options.cache_mode {
                    CacheMode::LastStep => retained[0].clone(),
                    CacheMode::Synchronized => retained[step].clone(),
                }
            },
            |step, caches| {
                if !use_cache {
                    return;
                }
                match options.cache_mode {
                    CacheMode::LastStep if step + 1 == timesteps.len() => produced.push(caches),
                    CacheMode::LastStep => {}
                    CacheMode::Synchronized => produced.push(caches),
                }
            },
        )?;
        if use_cache {
            peak_sets = peak_sets.max(produced.len()).max(retained.len());
            if options.keep_cache_dumps {
                cache_dumps.push(produced.last().cloned().unwrap_or_default());
            }
            retained = produced;
        }
        let valid = plan.segments[k].length;
        segment_outputs.push(from_model_space(&x0.frames(0, valid)?));
    }

    let mut video = blend_segments(plan, &segment_outputs)?;
    if options.color_correct {
        video = color_correct(&video, cond)?;
    }
    let video = video.map(|v| v.clamp(0.0, 1.0));
    Ok(SampleReport {
        video,
        segment_outputs,
        peak_cache_bytes: peak_sets * set_bytes,
        peak_cache_sets: peak_sets,
        cache_dumps,
    })
}

/// Places segment outputs on the timeline; overlapping frames are linearly
/// cross-faded from the earlier segment to the later one.
pub fn blend_segments(plan: &SegmentPlan, outputs: &[FrameStack]) -> Result<FrameStack> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::Data("no segment outputs".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = plan.total_frames;
    let mut video = Tensor::zeros(shape);
    for (seg, out) in plan.segments.iter().zip(outputs) {
        for j in 0..seg.length {
            let dst = video.frame_slice_mut(seg.start + j);
            let src = out.frame_slice(j);
            if j < seg.overlap {
                let wt = (j + 1) as f64 / (seg.overlap + 1) as f64;
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = (1.0 - wt) * *d + wt * s;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    Ok(video)
}
