use proptest::prelude::*;
use segvsr::autodiff::{pool_ranges, warp};
use segvsr::config::RunConfig;
use segvsr::data::degrade::quantize;
use segvsr::diffusion::{blend_segments, color_correct, tile_and_merge, SegmentPlan};
use segvsr::eval::psnr;
use segvsr::io::{read_video, write_video};
use segvsr::{Graph, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn video() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..7, 1usize..7, 1usize..4).prop_flat_map(|(n, h, w, c)| tensor(vec![n, h, w, c]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_flow_warp_is_identity(v in video()) {
        let s = v.shape();
        let flow = Tensor::zeros(vec![s[0], s[1], s[2], 2]);
        prop_assert_eq!(warp(&v, &flow).unwrap(), v);
    }

    #[test]
    fn integer_flow_warp_shifts(v in video(), dx in -2i32..=2, dy in -2i32..=2) {
        let (n, h, w, c) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
        let flow = Tensor::from_fn(vec![n, h, w, 2], |i| if i % 2 == 0 { dx as f64 } else { dy as f64 });
        let out = warp(&v, &flow).unwrap();
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let sx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    for ch in 0..c {
                        prop_assert_eq!(out.get(&[f, y, x, ch]), v.get(&[f, sy, sx, ch]));
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in tensor(vec![3, 5])) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v);
        for row in g.value(s).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn rope_preserves_norms(x in tensor(vec![4, 6]), pos in prop::collection::vec(0.0f64..50.0, 4)) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = g.rope(v, &pos).unwrap();
        for (a, b) in x.data().chunks(6).zip(g.value(r).data().chunks(6)) {
            let na: f64 = a.iter().map(|t| t * t).sum();
            let nb: f64 = b.iter().map(|t| t * t).sum();
            prop_assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_groups_partition_frames(n in 1usize..40, groups in 1usize..10) {
        prop_assume!(groups <= n);
        let r = pool_ranges(n, groups);
        prop_assert_eq!(r.len(), groups);
        prop_assert_eq!(r[0].0, 0);
        prop_assert_eq!(r[groups - 1].1, n);
        for w in r.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
        }
        prop_assert!(r.iter().all(|&(lo, hi)| hi > lo));
    }

    #[test]
    fn segment_plan_covers_video(total in 1usize..60, len in 1usize..10, overlap in 0usize..5) {
        prop_assume!(overlap < len);
        let plan = SegmentPlan::new(total, len, overlap).unwrap();
        let mut covered = vec![false; total];
        for (k, s) in plan.segments.iter().enumerate() {
            prop_assert!(s.length >= 1 && s.length <= len);
            for i in s.start..s.start + s.length {
                covered[i] = true;
            }
            if k > 0 {
                let prev = plan.segments[k - 1];
                prop_assert_eq!(s.start, prev.start + len - overlap);
                prop_assert_eq!(s.overlap, overlap);
            }
            let idx = plan.frame_indices(k);
            prop_assert_eq!(idx.len(), len);
            prop_assert!(idx.iter().all(|&i| i < total));
        }
        prop_assert!(covered.iter().all(|&c| c));
        let last = plan.segments.last().unwrap();
        prop_assert_eq!(last.start + last.length, total);
    }

    #[test]
    fn blending_identical_segments_reproduces_the_video(total in 2usize..20, len in 2usize..6, overlap in 0usize..3) {
        prop_assume!(overlap < len);
        let plan = SegmentPlan::new(total, len, overlap).unwrap();
        let video = Tensor::from_fn(vec![total, 2, 2, 1], |i| (i as f64 * 0.37).sin());
        let outs: Vec<Tensor> = plan.segments.iter().map(|s| video.frames(s.start, s.length).unwrap()).collect();
        let back = blend_segments(&plan, &outs).unwrap();
        prop_assert!(back.max_abs_diff(&video) < 1e-15);
    }

    #[test]
    fn tiling_partition_of_unity(h in 4usize..30, w in 4usize..30, tile in 3usize..20, overlap in 0usize..6) {
        prop_assume!(overlap < tile);
        let v = Tensor::from_fn(vec![2, h, w, 2], |i| (i as f64 * 0.11).cos());
        let out = tile_and_merge(&v, tile, overlap, |t| Ok(t.clone())).unwrap();
        prop_assert!(out.max_abs_diff(&v) <= 1e-10);
    }

    #[test]
    fn color_correction_is_affine_per_channel(v in tensor(vec![2, 3, 3, 2]), r in tensor(vec![2, 3, 3, 2])) {
        let out = color_correct(&v, &r).unwrap();
        for ch in 0..2 {
            let m = |t: &Tensor| t.data().iter().skip(ch).step_by(2).sum::<f64>() / 18.0;
            prop_assert!((m(&out) - m(&r)).abs() < 1e-9);
        }
        // Correcting twice changes nothing.
        let again = color_correct(&out, &r).unwrap();
        prop_assert!(again.max_abs_diff(&out) < 1e-9);
    }

    #[test]
    fn quantisation_is_idempotent(v in 0.0f64..=1.0, levels in 2u32..256) {
        let q = quantize(v, levels);
        prop_assert_eq!(quantize(q, levels), q);
        prop_assert!((q - v).abs() <= 0.5 / (levels - 1) as f64 + 1e-15);
    }

    #[test]
    fn psnr_is_symmetric(a in tensor(vec![2, 3, 3, 1]), b in tensor(vec![2, 3, 3, 1])) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn video_container_round_trip(v in video()) {
        let mut bytes = Vec::new();
        write_video(&mut bytes, &v).unwrap();
        prop_assert_eq!(read_video(bytes.as_slice()).unwrap(), v);
    }

    #[test]
    fn flat_config_round_trip(seed in any::<u64>(), blocks in 1usize..8, steps in 1usize..5000) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.blocks = blocks;
        cfg.train.steps = steps;
        let back = RunConfig::from_flat(&cfg.to_flat()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
