mod common;

use common::{perturb_params, rng};
use segvsr::amc::MemoryCache;
use segvsr::denoiser::{Denoiser, DenoiserConfig};
use segvsr::dta::TemporalMode;
use segvsr::{ParamStore, Tensor};

fn small() -> DenoiserConfig {
    DenoiserConfig {
        blocks: 3,
        dim: 8,
        heads: 2,
        patch_size: 2,
        dta_block_interval: Some(3),
        image_height: 8,
        image_width: 8,
        segment_length: 4,
        ..DenoiserConfig::default()
    }
}

fn build(cfg: DenoiserConfig, seed: u64) -> (Denoiser, ParamStore) {
    let mut store = ParamStore::new();
    let m = Denoiser::new(&mut store, &mut rng(seed), cfg).unwrap();
    perturb_params(&mut store, 0.2, seed + 100);
    (m, store)
}

#[test]
fn parameter_count_matches_closed_form() {
    let variants = [
        DenoiserConfig::default(),
        small(),
        DenoiserConfig { amc: false, ..small() },
        DenoiserConfig {
            temporal_mode: TemporalMode::Plain,
            ..small()
        },
        DenoiserConfig {
            dta_block_interval: None,
            amc: false,
            ..small()
        },
        DenoiserConfig {
            dta_block_interval: Some(1),
            patch_size: 4,
            ..small()
        },
    ];
    for cfg in variants {
        let mut store = ParamStore::new();
        Denoiser::new(&mut store, &mut rng(1), cfg.clone()).unwrap();
        assert_eq!(store.num_elements(), cfg.param_count(), "{cfg:?}");
    }
}

#[test]
fn frames_are_independent_without_temporal_blocks() {
    let cfg = DenoiserConfig {
        dta_block_interval: None,
        amc: false,
        ..small()
    };
    let (m, store) = build(cfg, 2);
    let z = Tensor::randn(vec![4, 8, 8, 3], &mut rng(3));
    let c = Tensor::randn(vec![4, 8, 8, 3], &mut rng(4));
    let (a, _) = m.denoise(&store, &z, 50, &c, &[]).unwrap();
    let mut z2 = z.clone();
    z2.frame_slice_mut(3).iter_mut().for_each(|v| *v += 1.0);
    let (b, _) = m.denoise(&store, &z2, 50, &c, &[]).unwrap();
    for f in 0..3 {
        assert_eq!(a.frame(f).unwrap(), b.frame(f).unwrap());
    }
    assert!(a.frame(3).unwrap().max_abs_diff(&b.frame(3).unwrap()) > 1e-6);
}

#[test]
fn temporal_blocks_couple_frames() {
    for mode in [TemporalMode::Plain, TemporalMode::Dynamic] {
        let (m, store) = build(
            DenoiserConfig {
                temporal_mode: mode,
                ..small()
            },
            5,
        );
        let z = Tensor::randn(vec![4, 8, 8, 3], &mut rng(6));
        let c = Tensor::randn(vec![4, 8, 8, 3], &mut rng(7));
        let caches = m.empty_caches(8, 8);
        let (a, _) = m.denoise(&store, &z, 50, &c, &caches).unwrap();
        let mut z2 = z.clone();
        z2.frame_slice_mut(3).iter_mut().for_each(|v| *v += 1.0);
        let (b, _) = m.denoise(&store, &z2, 50, &c, &caches).unwrap();
        assert!(
            a.frame(0).unwrap().max_abs_diff(&b.frame(0).unwrap()) > 1e-9,
            "{mode:?}"
        );
    }
}

#[test]
fn cache_contents_reach_the_output() {
    let (m, store) = build(small(), 8);
    let z = Tensor::randn(vec![4, 8, 8, 3], &mut rng(9));
    let c = Tensor::randn(vec![4, 8, 8, 3], &mut rng(10));
    let zero = m.empty_caches(8, 8);
    let filled: Vec<MemoryCache> = zero
        .iter()
        .map(|mc| {
            MemoryCache::from_slots(Tensor::randn(mc.slots().shape().to_vec(), &mut rng(11)), mc.block_id()).unwrap()
        })
        .collect();
    let (a, ca) = m.denoise(&store, &z, 20, &c, &zero).unwrap();
    let (b, cb) = m.denoise(&store, &z, 20, &c, &filled).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);
    assert_eq!(ca[0].slots().shape(), &[2, 4, 4, 8]);
    assert_eq!(cb[0].block_id(), 2);
    assert!(ca[0].slots().max_abs_diff(cb[0].slots()) > 1e-9);
}

#[test]
fn construction_and_evaluation_are_deterministic() {
    let (m1, s1) = build(small(), 12);
    let (m2, s2) = build(small(), 12);
    assert_eq!(s1.len(), s2.len());
    for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor, b.tensor);
    }
    let z = Tensor::randn(vec![4, 8, 8, 3], &mut rng(13));
    let caches = m1.empty_caches(8, 8);
    let (a, _) = m1.denoise(&s1, &z, 7, &z, &caches).unwrap();
    let (b, _) = m2.denoise(&s2, &z, 7, &z, &caches).unwrap();
    assert_eq!(a, b);
}

#[test]
fn timestep_changes_the_prediction() {
    let (m, store) = build(small(), 14);
    let z = Tensor::randn(vec![4, 8, 8, 3], &mut rng(15));
    let caches = m.empty_caches(8, 8);
    let (a, _) = m.denoise(&store, &z, 10, &z, &caches).unwrap();
    let (b, _) = m.denoise(&store, &z, 900, &z, &caches).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn wrong_cache_count_is_rejected() {
    let (m, store) = build(small(), 16);
    let z = Tensor::zeros(vec![4, 8, 8, 3]);
    assert!(matches!(
        m.denoise(&store, &z, 0, &z, &[]),
        Err(segvsr::Error::Config(_))
    ));
}
