//! Restores a long clip segment by segment with DDIM and compares peak cache
//! memory with and without the recurrent cache.
//!
//! cargo run --release --example segmentwise_sampling -- [frames]

use segvsr::data::{degrade, generate_scene, upsample, DegradationParams, Motion, SyntheticScene};
use segvsr::denoiser::{Denoiser, DenoiserConfig};
use segvsr::diffusion::{sample_segmentwise, NoiseSchedule, SampleOptions, SamplerConfig, SegmentPlan};
use segvsr::eval::{psnr, warping_error};
use segvsr::rng::stream;
use segvsr::{ParamStore, Tensor};

fn main() -> segvsr::Result<()> {
    let frames: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let scene = SyntheticScene {
        height: 16,
        width: 16,
        frames,
        motion: Motion::Translation { dx: 0.6, dy: 0.3 },
        seed: 4,
    };
    let video = generate_scene(&scene)?;
    let lq = degrade(&video.hq, &DegradationParams::identity(2))?;
    let cond = upsample(&lq, 2)?;

    let cfg = DenoiserConfig {
        blocks: 2,
        dim: 16,
        heads: 2,
        patch_size: 2,
        dta_block_interval: Some(2),
        image_height: 16,
        image_width: 16,
        segment_length: 4,
        ..DenoiserConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Denoiser::new(&mut store, &mut stream(1, "model", 0), cfg.clone())?;
    // Zero-initialised gates and fusion weights would hide the cache; jitter
    // every parameter as a stand-in for trained weights.
    let mut jitter = stream(1, "jitter", 0);
    for p in store.iter_mut() {
        let noise = Tensor::randn(p.tensor.shape().to_vec(), &mut jitter);
        p.tensor = p.tensor.zip_map(&noise, |a, e| a + 0.2 * e)?;
    }
    let schedule = NoiseSchedule::linear(1000)?;
    let plan = SegmentPlan::new(frames, cfg.segment_length, 1)?;
    let sampler = SamplerConfig {
        steps: 10,
        seed: 9,
        ..SamplerConfig::default()
    };
    println!("{frames} frames in {} segments (random weights)", plan.len());

    for use_cache in [true, false] {
        let opts = SampleOptions {
            use_cache,
            ..SampleOptions::default()
        };
        let r = sample_segmentwise(&model, &store, &schedule, &cond, &plan, &sampler, &opts)?;
        println!(
            "cache {:>5}: peak cache bytes {:>6}, psnr {:.2} dB, E_warp {:.4}e-3",
            use_cache,
            r.peak_cache_bytes,
            psnr(&r.video, &video.hq)?,
            warping_error(&r.video, &video.flow)? * 1e3
        );
    }
    Ok(())
}
