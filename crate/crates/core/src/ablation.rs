//! Four-variant temporal-modelling ablation on synthetic scenes: co-located
//! temporal attention, flow-warped attention, plus memory cache, plus
//! per-segment timesteps with last-step cache hand-over.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, DatasetConfig, Sample};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::training::fit;
use crate::diffusion::{
    sample_segmentwise, CacheMode, NoiseSchedule, SampleOptions, SamplerConfig, SegmentPlan, TrainOptions, Trainer,
};
use crate::dta::TemporalMode;
use crate::error::Result;
use crate::eval::{psnr, warping_error};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Co-located temporal attention, no cache, shared timesteps.
    Plain,
    /// Flow-warped temporal attention.
    Dynamic,
    /// Flow-warped attention plus memory cache, shared timesteps and
    /// step-synchronised cache hand-over.
    DynamicCache,
    /// As above with per-segment timesteps and last-step cache hand-over.
    DynamicCacheAsymmetric,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Plain,
        Variant::Dynamic,
        Variant::DynamicCache,
        Variant::DynamicCacheAsymmetric,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Plain => "(a) co-located attention",
            Variant::Dynamic => "(b) + flow warping",
            Variant::DynamicCache => "(c) + memory cache",
            Variant::DynamicCacheAsymmetric => "(d) + per-segment steps",
        }
    }

    pub fn model(self, base: &DenoiserConfig) -> DenoiserConfig {
        let mut m = base.clone();
        m.temporal_mode = match self {
            Variant::Plain => TemporalMode::Plain,
            _ => TemporalMode::Dynamic,
        };
        m.amc = matches!(self, Variant::DynamicCache | Variant::DynamicCacheAsymmetric);
        m
    }

    pub fn train_options(self) -> TrainOptions {
        TrainOptions {
            asymmetric: self == Variant::DynamicCacheAsymmetric,
        }
    }

    pub fn sample_options(self) -> SampleOptions {
        SampleOptions {
            cache_mode: match self {
                Variant::DynamicCacheAsymmetric => CacheMode::LastStep,
                _ => CacheMode::Synchronized,
            },
            ..SampleOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub model: DenoiserConfig,
    pub train_data: DatasetConfig,
    pub heldout_data: DatasetConfig,
    pub steps: usize,
    pub lr: f64,
    pub schedule_steps: usize,
    pub sampler_steps: usize,
    pub overlap: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            model: DenoiserConfig {
                blocks: 3,
                dim: 16,
                heads: 2,
                patch_size: 2,
                dta_block_interval: Some(3),
                ..DenoiserConfig::default()
            },
            train_data: DatasetConfig {
                scenes: 16,
                seed: 11,
                ..DatasetConfig::default()
            },
            heldout_data: DatasetConfig {
                scenes: 4,
                seed: 12,
                ..DatasetConfig::default()
            },
            steps: 2000,
            lr: 1e-3,
            schedule_steps: 1000,
            sampler_steps: 15,
            overlap: 1,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// Mean held-out warping error, ×1e3.
    pub ewarp_e3: f64,
    pub psnr_db: f64,
    pub per_scene_ewarp_e3: Vec<f64>,
    /// Mean loss over the last 100 steps.
    pub final_loss: f64,
    pub train_seconds: f64,
}

fn pairs(samples: &[Sample]) -> Result<Vec<(crate::tensor::FrameStack, crate::tensor::FrameStack)>> {
    samples.iter().map(|s| Ok((s.hq.clone(), s.condition()?))).collect()
}

/// Trains one variant and scores it on the held-out scenes.
pub fn run_variant(
    cfg: &AblationConfig,
    variant: Variant,
    train: &[Sample],
    heldout: &[Sample],
) -> Result<VariantResult> {
    let start = Instant::now();
    let schedule = NoiseSchedule::linear(cfg.schedule_steps)?;
    let mut trainer = Trainer::new(
        variant.model(&cfg.model),
        schedule,
        cfg.lr,
        cfg.seed,
        variant.train_options(),
    )?;
    let mut losses = Vec::with_capacity(cfg.steps);
    fit(&mut trainer, &pairs(train)?, cfg.steps, |_, _, loss| {
        losses.push(loss);
        Ok(())
    })?;
    let train_seconds = start.elapsed().as_secs_f64();
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;

    let options = variant.sample_options();
    let mut per_scene = Vec::with_capacity(heldout.len());
    let mut psnrs = Vec::with_capacity(heldout.len());
    for (k, s) in heldout.iter().enumerate() {
        let cond = s.condition()?;
        let plan = SegmentPlan::new(cond.dim(0), cfg.model.segment_length, cfg.overlap)?;
        let sampler = SamplerConfig {
            steps: cfg.sampler_steps,
            seed: derive_seed(cfg.seed, "heldout", k as u64),
            ..SamplerConfig::default()
        };
        let report = sample_segmentwise(
            &trainer.model,
            &trainer.store,
            &trainer.schedule,
            &cond,
            &plan,
            &sampler,
            &options,
        )?;
        per_scene.push(warping_error(&report.video, &s.flow)? * 1e3);
        psnrs.push(psnr(&report.video, &s.hq)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(VariantResult {
        variant,
        ewarp_e3: mean(&per_scene),
        psnr_db: mean(&psnrs),
        per_scene_ewarp_e3: per_scene,
        final_loss,
        train_seconds,
    })
}

/// Runs all four variants (in parallel when threads are available).
pub fn run_ablation(cfg: &AblationConfig) -> Result<Vec<VariantResult>> {
    let train = generate_dataset(&cfg.train_data)?;
    let heldout = generate_dataset(&cfg.heldout_data)?;
    Variant::ALL
        .par_iter()
        .map(|&v| run_variant(cfg, v, &train, &heldout))
        .collect()
}

/// Number of non-increasing steps along a → b → c → d.
pub fn non_increasing_transitions(results: &[VariantResult]) -> usize {
    results.windows(2).filter(|w| w[1].ewarp_e3 <= w[0].ewarp_e3).count()
}
