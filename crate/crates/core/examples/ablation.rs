//! Trains the four temporal-modelling variants on synthetic scenes and
//! compares held-out warping error.
//!
//! cargo run --release --example ablation -- [steps] [patch] [dim]

use segvsr::ablation::{non_increasing_transitions, run_ablation, AblationConfig};

fn main() -> segvsr::Result<()> {
    let mut cfg = AblationConfig::default();
    let arg = |i: usize| std::env::args().nth(i).and_then(|s| s.parse::<usize>().ok());
    if let Some(steps) = arg(1) {
        cfg.steps = steps;
    }
    if let Some(patch) = arg(2) {
        cfg.model.patch_size = patch;
    }
    if let Some(dim) = arg(3) {
        cfg.model.dim = dim;
    }
    let results = run_ablation(&cfg)?;
    println!(
        "{:<22} {:>10} {:>9} {:>10} {:>8}",
        "variant", "E*_warp", "PSNR", "loss", "train s"
    );
    for r in &results {
        println!(
            "{:<22} {:>10.4} {:>9.3} {:>10.4} {:>8.1}",
            r.variant.label(),
            r.ewarp_e3,
            r.psnr_db,
            r.final_loss,
            r.train_seconds
        );
        println!(
            "    per scene: {:?}",
            r.per_scene_ewarp_e3
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
        );
    }
    println!("non-increasing transitions: {}/3", non_increasing_transitions(&results));
    Ok(())
}
