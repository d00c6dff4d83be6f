//! Runs flow-warped temporal attention on a moving pattern and reports the
//! estimated flows, attention sparsity and score count against full attention.
//!
//! cargo run --release --example dta_attention

use segvsr::data::{generate_scene, Motion, SyntheticScene};
use segvsr::dta::{Dta, DtaConfig};
use segvsr::rng::stream;
use segvsr::{Graph, ParamStore};

fn main() -> segvsr::Result<()> {
    let scene = SyntheticScene {
        height: 16,
        width: 16,
        frames: 4,
        motion: Motion::Translation { dx: 1.0, dy: 0.5 },
        seed: 3,
    };
    let video = generate_scene(&scene)?;
    // Lift RGB to an 8-channel feature map by repetition.
    let features = segvsr::Tensor::from_fn(vec![4, 16, 16, 8], |i| {
        let (pixel, ch) = (i / 8, i % 8);
        video.hq.data()[pixel * 3 + ch % 3] - 0.5
    });

    let mut store = ParamStore::new();
    let cfg = DtaConfig::new(8, 2, 4);
    let dta = Dta::new(&mut store, &mut stream(1, "dta", 0), "dta", cfg.clone())?;
    let mut g = Graph::new();
    let x = g.constant(features);
    let out = dta.forward_segment(&mut g, &store, x)?;

    let attn = g.value(out.attention);
    let peak = attn
        .data()
        .chunks(4)
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / (attn.numel() / 4) as f64;
    println!("output shape {:?}", g.value(out.features).shape());
    println!("mean peak attention weight {peak:.3} over 4 frames");
    if let Some(flows) = out.flows {
        let f = g.value(flows);
        let mag = f.data().chunks(2).map(|v| v[0].hypot(v[1])).sum::<f64>() / (f.numel() / 2) as f64;
        println!("mean |flow| at initialisation {mag:.2e} (zero-initialised head)");
    }
    println!(
        "score entries: {} vs full spatio-temporal {}",
        out.score_entries,
        cfg.full_attention_score_entries(16, 16, 4)
    );
    Ok(())
}
