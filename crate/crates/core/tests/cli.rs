use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use segvsr::cli::{
    cmd_eval, cmd_gen, cmd_infer, cmd_train, Overrides, CHECKPOINT_FILE, LOSS_LOG, RUN_FILE, TIMING_FILE,
};
use segvsr::config::RunConfig;
use segvsr::diffusion::SegmentPlan;
use segvsr::io::{load_video, save_video};

fn tiny_run(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.model.blocks = 2;
    cfg.model.dim = 8;
    cfg.model.heads = 2;
    cfg.model.dta_block_interval = Some(2);
    cfg.model.segment_length = 4;
    cfg.model.image_height = 16;
    cfg.model.image_width = 16;
    cfg.data.scenes = 2;
    cfg.data.frames = 8;
    cfg.data.height = 16;
    cfg.data.width = 16;
    cfg.data.seed = 3;
    cfg.train.steps = 4;
    cfg.infer.sampler_steps = 3;
    cfg.eval.profile_rows = vec![4, 9];
    cfg.paths.out = Some(root.join("data"));
    cfg
}

fn with_out(cfg: &RunConfig, out: PathBuf) -> RunConfig {
    let mut c = cfg.clone();
    c.paths.out = Some(out);
    c
}

/// Every file under `dir` except the named ones, by relative path.
fn snapshot(dir: &Path, skip: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            if !skip.contains(&rel.as_str()) {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn replay(run_file: &Path) -> RunConfig {
    Overrides {
        config: Some(run_file.to_path_buf()),
        ..Overrides::default()
    }
    .resolve()
    .unwrap()
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    base: RunConfig,
}

fn pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let base = tiny_run(&root);
    cmd_gen(&base).unwrap();
    let mut train = with_out(&base, root.join("train"));
    train.paths.dataset = Some(root.join("data"));
    cmd_train(&train).unwrap();
    Pipeline { _dir: dir, root, base }
}

fn infer_cfg(p: &Pipeline, out: &str) -> RunConfig {
    let mut c = with_out(&p.base, p.root.join(out));
    c.paths.checkpoint = Some(p.root.join("train").join(CHECKPOINT_FILE));
    c.paths.input = Some(p.root.join("data/scene_0000_lq.lvsr"));
    c
}

#[test]
fn gen_train_infer_eval_round_trip() {
    let p = pipeline();
    let data = p.root.join("data");
    assert!(data.join("manifest.json").exists());
    assert!(data.join("scene_0001_flow.lvsr").exists());
    let losses = fs::read_to_string(p.root.join("train").join(LOSS_LOG)).unwrap();
    assert_eq!(losses.lines().count(), 5);

    let infer = infer_cfg(&p, "infer");
    let s = cmd_infer(&infer).unwrap();
    assert_eq!(s.segments, SegmentPlan::new(8, 4, 1).unwrap().len());
    assert_eq!(s.peak_cache_bytes, 2 * 8 * 8 * 8 * 8);
    let lq = load_video(&data.join("scene_0000_lq.lvsr")).unwrap();
    let restored = load_video(&s.output).unwrap();
    assert_eq!(restored.shape(), &[lq.dim(0), 4 * lq.dim(1), 4 * lq.dim(2), 3]);

    let mut eval = with_out(&p.base, p.root.join("eval"));
    eval.paths.input = Some(s.output.clone());
    eval.paths.reference = Some(data.join("scene_0000_hq.lvsr"));
    eval.paths.flow = Some(data.join("scene_0000_flow.lvsr"));
    let report = cmd_eval(&eval).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(report.rows[0].psnr_db.unwrap() > 5.0);
    assert!(report.rows[0].runtime_s > 0.0);
    for f in [
        "metrics.csv",
        "profile_row004.ppm",
        "profile_row009_reference.ppm",
        RUN_FILE,
    ] {
        assert!(p.root.join("eval").join(f).exists(), "{f}");
    }
}

#[test]
fn reruns_from_run_file_are_byte_identical() {
    let p = pipeline();
    for stage in ["data", "train"] {
        let dir = p.root.join(stage);
        let before = snapshot(&dir, &[]);
        let cfg = replay(&dir.join(RUN_FILE));
        match stage {
            "data" => drop(cmd_gen(&cfg).unwrap()),
            _ => drop(cmd_train(&cfg).unwrap()),
        }
        assert_eq!(snapshot(&dir, &[]), before, "{stage}");
    }
    let first = infer_cfg(&p, "infer");
    cmd_infer(&first).unwrap();
    let dir = p.root.join("infer");
    let before = snapshot(&dir, &[TIMING_FILE]);
    cmd_infer(&replay(&dir.join(RUN_FILE))).unwrap();
    assert_eq!(snapshot(&dir, &[TIMING_FILE]), before);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let p = pipeline();
    let mut half = with_out(&p.base, p.root.join("half"));
    half.paths.dataset = Some(p.root.join("data"));
    half.train.steps = 2;
    cmd_train(&half).unwrap();
    let mut rest = with_out(&half, p.root.join("rest"));
    rest.train.steps = 4;
    rest.paths.resume = Some(p.root.join("half").join(CHECKPOINT_FILE));
    let resumed = cmd_train(&rest).unwrap();

    let full = fs::read_to_string(p.root.join("train").join(LOSS_LOG)).unwrap();
    let tail = fs::read_to_string(p.root.join("rest").join(LOSS_LOG)).unwrap();
    let full_tail: Vec<&str> = full.lines().skip(3).collect();
    let resumed_tail: Vec<&str> = tail.lines().skip(1).collect();
    assert_eq!(full_tail, resumed_tail);
    assert_eq!(
        fs::read(p.root.join("train").join(CHECKPOINT_FILE)).unwrap(),
        fs::read(&resumed.checkpoint).unwrap()
    );
}

#[test]
fn resume_with_other_model_is_rejected() {
    let p = pipeline();
    let mut cfg = with_out(&p.base, p.root.join("other"));
    cfg.paths.dataset = Some(p.root.join("data"));
    cfg.paths.resume = Some(p.root.join("train").join(CHECKPOINT_FILE));
    cfg.model.cache_len = 1;
    assert!(matches!(cmd_train(&cfg), Err(segvsr::Error::Version(_))));
}

#[test]
fn long_video_and_switches() {
    let p = pipeline();
    let data = p.root.join("data");
    // 24 frames built by repeating the 8-frame clip.
    let lq = load_video(&data.join("scene_0000_lq.lvsr")).unwrap();
    let frames: Vec<_> = (0..24).map(|i| lq.frame(i % 8).unwrap()).collect();
    let long = segvsr::Tensor::cat_frames(&frames).unwrap();
    let input = p.root.join("long_lq.lvsr");
    save_video(&input, &long).unwrap();

    let mut cfg = infer_cfg(&p, "long");
    cfg.paths.input = Some(input);
    let s = cmd_infer(&cfg).unwrap();
    assert_eq!(s.segments, SegmentPlan::new(24, 4, 1).unwrap().len());
    assert_eq!(load_video(&s.output).unwrap().shape(), &[24, 16, 16, 3]);

    let mut no_cache = cfg.clone();
    no_cache.paths.out = Some(p.root.join("long_nocache"));
    no_cache.infer.use_cache = false;
    assert_eq!(cmd_infer(&no_cache).unwrap().peak_cache_bytes, 0);

    let mut dumps = cfg.clone();
    dumps.paths.out = Some(p.root.join("long_dumps"));
    dumps.infer.dump_caches = true;
    cmd_infer(&dumps).unwrap();
    let cache_dir = p.root.join("long_dumps/caches");
    assert_eq!(fs::read_dir(&cache_dir).unwrap().count(), s.segments);
    let first = fs::read(cache_dir.join("segment000_block1.amc")).unwrap();
    assert_eq!(&first[..8], b"LVSRCACH");
    assert_eq!(first.len(), 64 + 2 * 8 * 8 * 8 * 8);

    let mut tiled = cfg.clone();
    tiled.paths.out = Some(p.root.join("long_tiled"));
    tiled.infer.tile = Some(12);
    tiled.infer.tile_overlap = 4;
    let t = cmd_infer(&tiled).unwrap();
    assert_eq!(load_video(&t.output).unwrap().shape(), &[24, 16, 16, 3]);
}

#[test]
fn flags_resolve_onto_the_config() {
    let o = Overrides {
        seed: Some(9),
        steps: Some(7),
        no_amc: true,
        no_dta: true,
        no_ass: true,
        tile: Some(32),
        ..Overrides::default()
    };
    let cfg = o.resolve().unwrap();
    assert_eq!((cfg.seed, cfg.data.seed, cfg.train.steps), (9, 9, 7));
    assert!(!cfg.model.amc && !cfg.infer.use_cache);
    assert_eq!(cfg.model.temporal_mode, segvsr::dta::TemporalMode::Plain);
    assert!(!cfg.train.asymmetric);
    assert_eq!(cfg.infer.cache_mode, segvsr::diffusion::CacheMode::Synchronized);
    assert_eq!(cfg.infer.tile, Some(32));
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_segvsr"));
    c.stdout(Stdio::null()).stderr(Stdio::null());
    c
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_run(root);
    let cfg_path = root.join("cfg.json");
    fs::write(
        &cfg_path,
        serde_json::to_string(&serde_json::Value::Object(cfg.to_flat())).unwrap(),
    )
    .unwrap();

    let st = bin().args(["gen", "--config"]).arg(&cfg_path).status().unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(root.join("data").join(RUN_FILE).exists());

    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--steps", "1", "--out"])
        .arg(root.join("train"))
        .args(["--dataset"])
        .arg(root.join("missing"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));

    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--steps", "1", "--segment-len", "3", "--out"])
        .arg(root.join("train"))
        .args(["--dataset"])
        .arg(root.join("data"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    let bad = root.join("bad.json");
    fs::write(&bad, r#"{"model.no_such_key": 1}"#).unwrap();
    let st = bin().args(["gen", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(2));

    let st = bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .args(["--input"])
        .arg(root.join("data/scene_0000_hq.lvsr"))
        .args(["--out"])
        .arg(root.join("eval"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_segvsr"))
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .args(["--input"])
        .arg(root.join("data/scene_0000_hq.lvsr"))
        .args(["--flow"])
        .arg(root.join("data/scene_0000_flow.lvsr"))
        .args(["--out"])
        .arg(root.join("eval"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("video_id,psnr_db,ewarp_e3,runtime_s"));
}
