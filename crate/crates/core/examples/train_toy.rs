//! Trains a small denoiser on synthetic scenes and prints the loss curve.
//!
//! cargo run --release --example train_toy -- [steps]

use std::time::Instant;

use segvsr::data::{generate_dataset, DatasetConfig};
use segvsr::denoiser::DenoiserConfig;
use segvsr::diffusion::{NoiseSchedule, TrainOptions, Trainer};

fn main() -> segvsr::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let data = DatasetConfig {
        scenes: 8,
        ..DatasetConfig::default()
    };
    let samples = generate_dataset(&data)?;
    let pairs = samples
        .iter()
        .map(|s| Ok((s.hq.clone(), s.condition()?)))
        .collect::<segvsr::Result<Vec<_>>>()?;

    let model = DenoiserConfig::default();
    println!("parameters: {}", model.param_count());
    let mut trainer = Trainer::new(model, NoiseSchedule::linear(1000)?, 1e-3, 7, TrainOptions::default())?;
    let start = Instant::now();
    let mut window = Vec::new();
    for step in 0..steps {
        let (hq, cond) = &pairs[step % pairs.len()];
        window.push(trainer.step(hq, cond)?);
        if window.len() == 10 || step + 1 == steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!(
                "step {:>5}  loss {mean:.4}  {:.2}s",
                step + 1,
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
    }
    Ok(())
}
