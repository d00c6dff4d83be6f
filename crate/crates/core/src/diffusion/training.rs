use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::plan::SegmentPlan;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::param::ParamStore;
use crate::rng::stream;
use crate::tensor::{FrameStack, Tensor};

/// Maps `[0, 1]` pixels to the `[-1, 1]` range the model works in.
pub fn to_model_space(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

pub fn from_model_space(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * (v + 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Draw an independent timestep for every segment of a training video.
    pub asymmetric: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { asymmetric: true }
    }
}

/// Per-segment timesteps: independent uniform draws, or one shared draw.
pub fn sample_segment_timesteps<R: Rng + ?Sized>(
    rng: &mut R,
    segments: usize,
    total_steps: usize,
    asymmetric: bool,
) -> Vec<usize> {
    if asymmetric {
        (0..segments).map(|_| rng.gen_range(0..total_steps)).collect()
    } else {
        let t = rng.gen_range(0..total_steps);
        vec![t; segments]
    }
}

pub struct LossOutput {
    /// Mean over segments of the per-segment noise MSE.
    pub loss: Var,
    pub segment_losses: Vec<Var>,
    pub timesteps: Vec<usize>,
}

/// Noise-prediction loss over a whole training video, processed segment by
/// segment. Caches start at zero and each segment's updated caches condition
/// the next one; the gradient flows through them within the video.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Denoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    hq: &FrameStack,
    cond: &FrameStack,
    rng: &mut R,
    options: TrainOptions,
) -> Result<LossOutput> {
    if hq.shape() != cond.shape() || hq.rank() != 4 {
        return Err(Error::shape("training pair", hq.shape(), cond.shape()));
    }
    let n = model.config.segment_length;
    let plan = SegmentPlan::training(hq.dim(0), n)?;
    let timesteps = sample_segment_timesteps(rng, plan.len(), schedule.len(), options.asymmetric);
    let (h, w) = (hq.dim(1), hq.dim(2));
    let mut caches: Vec<Var> = model
        .empty_caches(h, w)
        .into_iter()
        .map(|c| g.constant(c.slots().clone()))
        .collect();
    let mut segment_losses = Vec::with_capacity(plan.len());
    for (seg, &t) in plan.segments.iter().zip(&timesteps) {
        let z0 = to_model_space(&hq.frames(seg.start, n)?);
        let c = to_model_space(&cond.frames(seg.start, n)?);
        let noise = Tensor::randn(z0.shape().to_vec(), rng);
        let zt = schedule.forward_diffuse(&z0, t, &noise)?;
        let zt = g.constant(zt);
        let c = g.constant(c);
        let out = model.forward(g, store, zt, t, c, &caches)?;
        let target = g.constant(noise);
        segment_losses.push(g.mse(out.noise, target)?);
        caches = out.caches;
    }
    let stacked = g.concat(&segment_losses, 0)?;
    let loss = g.mean_all(stacked);
    g.check_finite(loss, "loss")?;
    Ok(LossOutput {
        loss,
        segment_losses,
        timesteps,
    })
}

/// Model, weights and optimiser state for a training run.
pub struct Trainer {
    pub model: Denoiser,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub schedule: NoiseSchedule,
    pub options: TrainOptions,
    pub seed: u64,
}

impl Trainer {
    pub fn new(
        config: DenoiserConfig,
        schedule: NoiseSchedule,
        lr: f64,
        seed: u64,
        options: TrainOptions,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "init", 0);
        let model = Denoiser::new(&mut store, &mut rng, config)?;
        let optimizer = Adam::new(&store, lr);
        Ok(Trainer {
            model,
            store,
            optimizer,
            schedule,
            options,
            seed,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    /// One optimiser step on a single video pair. Randomness is keyed by
    /// `(seed, step)`, so a resumed run replays the same draws.
    pub fn step(&mut self, hq: &FrameStack, cond: &FrameStack) -> Result<f64> {
        let mut rng = stream(self.seed, "train-step", self.steps_taken());
        let mut g = Graph::new();
        let out = training_loss(
            &mut g,
            &self.model,
            &self.store,
            &self.schedule,
            hq,
            cond,
            &mut rng,
            self.options,
        )?;
        let loss = g.value(out.loss).data()[0];
        let grads = g.backward(out.loss)?;
        grads.accumulate_into(&mut self.store);
        self.optimizer.step(&mut self.store)?;
        Ok(loss)
    }
}

/// Order in which training videos are visited in `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut stream(seed, "epoch-order", epoch));
    order
}

/// Trains until `total_steps` optimiser steps have been taken, one video per
/// step in a per-epoch shuffled order. `on_step` sees the step number (from 1)
/// and its loss.
pub fn fit(
    trainer: &mut Trainer,
    pairs: &[(FrameStack, FrameStack)],
    total_steps: usize,
    mut on_step: impl FnMut(&Trainer, u64, f64) -> Result<()>,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Data("no training videos".into()));
    }
    let count = pairs.len() as u64;
    while (trainer.steps_taken() as usize) < total_steps {
        let step = trainer.steps_taken();
        let idx = epoch_order(trainer.seed, step / count, pairs.len())[(step % count) as usize];
        let (hq, cond) = &pairs[idx];
        let loss = trainer.step(hq, cond)?;
        on_step(trainer, step + 1, loss)?;
    }
    Ok(())
}
