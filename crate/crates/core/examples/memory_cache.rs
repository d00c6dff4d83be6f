//! Streams segments through the gated memory cache and prints how much of
//! each slot is overwritten per segment.
//!
//! cargo run --release --example memory_cache

use segvsr::amc::Amc;
use segvsr::dta::{Dta, DtaConfig};
use segvsr::rng::stream;
use segvsr::{Graph, ParamStore, Tensor};

fn main() -> segvsr::Result<()> {
    let (len, h, w, d, n) = (2, 4, 4, 8, 4);
    let mut store = ParamStore::new();
    let dta = Dta::new(&mut store, &mut stream(1, "dta", 0), "dta", DtaConfig::new(d, 2, n))?;
    let amc = Amc::new(&mut store, &mut stream(1, "amc", 0), "amc", len, d, 2)?;
    // The fusion weight starts at zero; give it the value a trained model might reach.
    store.get_mut(amc.fuse_scale).tensor = Tensor::scalar(0.5);
    let mut cache = amc.empty_cache(h, w, 0);
    println!("cache holds {} bytes independent of video length", cache.byte_size());

    for segment in 0..5 {
        let features = Tensor::randn(vec![n, h, w, d], &mut stream(2, "features", segment));
        let mut g = Graph::new();
        let f = g.constant(features);
        let c = g.constant(cache.slots().clone());
        let fused = amc.query_and_fuse(&mut g, &store, &dta, f, c)?;
        let updated = amc.update(&mut g, &store, f, c)?;
        let next = g.value(updated).clone();
        let change = next.max_abs_diff(cache.slots());
        let shift = g.value(fused).max_abs_diff(g.value(f));
        cache.store(next)?;
        println!("segment {segment}: max slot change {change:.3}, max feature shift from cache {shift:.3}");
    }
    Ok(())
}
