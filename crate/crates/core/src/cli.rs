//! Command-line front end: `gen`, `train`, `infer` and `eval`.
//!
//! Every command writes `run.json` into its output directory: the resolved
//! flat configuration plus `run.*` metadata. Passing that file back through
//! `--config` replays the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::amc::MemoryCache;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_dataset, upsample, write_dataset};
use crate::diffusion::training::fit;
use crate::diffusion::{
    color_correct, sample_segmentwise, tile_and_merge, CacheMode, NoiseSchedule, SampleOptions, SamplerConfig,
    SegmentPlan, TrainOptions, Trainer,
};
use crate::dta::TemporalMode;
use crate::error::{Error, Result};
use crate::eval::{psnr, save_ppm, temporal_profile, warping_error, MetricReport, MetricRow};
use crate::io::{file_hash, load_video, save_video};
use crate::rng::derive_seed;

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG: &str = "loss.csv";
pub const RESTORED_FILE: &str = "restored.lvsr";
pub const TIMING_FILE: &str = "timing.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(
    name = "segvsr",
    version,
    about = "Segment-wise diffusion video super-resolution on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic LQ/HQ dataset with ground-truth flow.
    Gen(Overrides),
    /// Train a denoiser on a generated dataset.
    Train(Overrides),
    /// Restore a low-quality video container.
    Infer(Overrides),
    /// Score a restored video and write temporal profiles.
    Eval(Overrides),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
        }
    }

    pub fn overrides(&self) -> &Overrides {
        match self {
            Command::Gen(o) | Command::Train(o) | Command::Infer(o) | Command::Eval(o) => o,
        }
    }
}

#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    /// Flat JSON config; `run.json` from an earlier run also works.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps (total, counting any resumed steps).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub segment_len: Option<usize>,
    #[arg(long)]
    pub cache_len: Option<usize>,
    #[arg(long)]
    pub sampler_steps: Option<usize>,
    /// Disable the memory cache.
    #[arg(long)]
    pub no_amc: bool,
    /// Replace flow-warped temporal attention with co-located attention.
    #[arg(long)]
    pub no_dta: bool,
    /// Shared timesteps in training; per-step cache hand-over in inference.
    #[arg(long)]
    pub no_ass: bool,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub tile_overlap: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Number of scenes to generate.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Frames per generated scene.
    #[arg(long)]
    pub frames: Option<usize>,
}

impl Overrides {
    /// Loads the base config (or defaults) and applies the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.data.seed = s;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.segment_len {
            cfg.model.segment_length = v;
        }
        if let Some(v) = self.cache_len {
            cfg.model.cache_len = v;
        }
        if let Some(v) = self.sampler_steps {
            cfg.infer.sampler_steps = v;
        }
        if self.no_amc {
            cfg.model.amc = false;
            cfg.infer.use_cache = false;
        }
        if self.no_dta {
            cfg.model.temporal_mode = TemporalMode::Plain;
        }
        if self.no_ass {
            cfg.train.asymmetric = false;
            cfg.infer.cache_mode = CacheMode::Synchronized;
        }
        if let Some(v) = self.tile {
            cfg.infer.tile = Some(v);
        }
        if let Some(v) = self.tile_overlap {
            cfg.infer.tile_overlap = v;
        }
        if let Some(v) = self.scenes {
            cfg.data.scenes = v;
        }
        if let Some(v) = self.frames {
            cfg.data.frames = v;
        }
        let p = &mut cfg.paths;
        for (dst, src) in [
            (&mut p.out, &self.out),
            (&mut p.dataset, &self.dataset),
            (&mut p.checkpoint, &self.checkpoint),
            (&mut p.resume, &self.resume),
            (&mut p.input, &self.input),
            (&mut p.reference, &self.reference),
            (&mut p.flow, &self.flow),
        ] {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required path: {what}")))
}

fn write_run_file(dir: &Path, command: &str, cfg: &RunConfig, extra: Map<String, Value>) -> Result<()> {
    let mut flat = cfg.to_flat();
    flat.insert("run.command".into(), Value::from(command));
    flat.insert("run.version".into(), Value::from(env!("CARGO_PKG_VERSION")));
    flat.extend(extra);
    fs::write(
        dir.join(RUN_FILE),
        serde_json::to_string_pretty(&Value::Object(flat))? + "\n",
    )?;
    Ok(())
}

/// Writes the dataset and returns the output directory.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let out = required(&cfg.paths.out, "--out")?.to_path_buf();
    let samples = generate_dataset(&cfg.data)?;
    write_dataset(&out, &cfg.data, &samples)?;
    write_run_file(&out, "gen", cfg, Map::new())?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let out = required(&cfg.paths.out, "--out")?.to_path_buf();
    let dataset = required(&cfg.paths.dataset, "--dataset")?;
    let (_, samples) = load_dataset(dataset)?;
    if samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let mut trainer = match &cfg.paths.resume {
        Some(path) => {
            let t = load_checkpoint(path)?;
            if t.model.config != cfg.model {
                return Err(Error::Version(
                    "resume checkpoint was trained with a different model config".into(),
                ));
            }
            t
        }
        None => {
            let schedule =
                NoiseSchedule::linear_betas(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)?;
            let options = TrainOptions {
                asymmetric: cfg.train.asymmetric,
            };
            Trainer::new(cfg.model.clone(), schedule, cfg.train.lr, cfg.seed, options)?
        }
    };
    let m = &trainer.model.config;
    let pairs = samples
        .iter()
        .map(|s| {
            if s.hq.dim(1) != m.image_height || s.hq.dim(2) != m.image_width || s.hq.dim(3) != m.channels {
                return Err(Error::Config(format!(
                    "dataset frames {:?} do not fit a {}x{}x{} model",
                    &s.hq.shape()[1..],
                    m.image_height,
                    m.image_width,
                    m.channels
                )));
            }
            if s.hq.dim(0) % m.segment_length != 0 {
                return Err(Error::Config(format!(
                    "{} frames is not a multiple of segment length {}",
                    s.hq.dim(0),
                    m.segment_length
                )));
            }
            Ok((s.hq.clone(), s.condition()?))
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&out)?;
    let mut log = String::from("step,loss\n");
    let mut losses = Vec::new();
    let ckpt = out.join(CHECKPOINT_FILE);
    let every = cfg.train.checkpoint_every as u64;
    fit(&mut trainer, &pairs, cfg.train.steps, |t, step, loss| {
        log.push_str(&format!("{step},{loss:.17e}\n"));
        losses.push(loss);
        if every > 0 && step % every == 0 {
            save_checkpoint(&ckpt, t)?;
        }
        Ok(())
    })?;
    fs::write(out.join(LOSS_LOG), log)?;
    let hash = save_checkpoint(&ckpt, &trainer)?;
    let mut extra = Map::new();
    extra.insert("run.checkpoint_hash".into(), Value::from(hash.clone()));
    extra.insert("run.train_seed".into(), Value::from(trainer.seed));
    write_run_file(&out, "train", cfg, extra)?;
    Ok(TrainSummary {
        losses,
        checkpoint: ckpt,
        checkpoint_hash: hash,
    })
}

#[derive(Clone, Debug)]
pub struct InferSummary {
    pub output: PathBuf,
    pub segments: usize,
    pub peak_cache_bytes: usize,
    pub runtime_s: f64,
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<InferSummary> {
    let out = required(&cfg.paths.out, "--out")?.to_path_buf();
    let ckpt = required(&cfg.paths.checkpoint, "--checkpoint")?;
    let input = required(&cfg.paths.input, "--input")?;
    let trainer = load_checkpoint(ckpt)?;
    let lq = load_video(input)?;
    let start = Instant::now();
    let cond = upsample(&lq, cfg.data.recipe.scale)?;
    let model = &trainer.model;
    let plan = SegmentPlan::new(cond.dim(0), model.config.segment_length, cfg.infer.overlap)?;
    let sampler = SamplerConfig {
        steps: cfg.infer.sampler_steps,
        seed: derive_seed(cfg.seed, "sampler", 0),
        ..SamplerConfig::default()
    };
    let tiled = cfg.infer.tile.is_some_and(|t| t < cond.dim(1) || t < cond.dim(2));
    let options = SampleOptions {
        cache_mode: cfg.infer.cache_mode,
        use_cache: cfg.infer.use_cache,
        color_correct: false,
        keep_cache_dumps: cfg.infer.dump_caches && !tiled,
    };
    let run = |frames: &crate::tensor::FrameStack| {
        sample_segmentwise(
            model,
            &trainer.store,
            &trainer.schedule,
            frames,
            &plan,
            &sampler,
            &options,
        )
    };
    let (mut video, peak, dumps) = if tiled {
        let tile = cfg.infer.tile.expect("tiled implies tile");
        let v = tile_and_merge(&cond, tile, cfg.infer.tile_overlap, |t| Ok(run(t)?.video))?;
        (v, 0, Vec::new())
    } else {
        let r = run(&cond)?;
        (r.video, r.peak_cache_bytes, r.cache_dumps)
    };
    if cfg.infer.color_correct {
        video = color_correct(&video, &cond)?.map(|v| v.clamp(0.0, 1.0));
    }
    let runtime_s = start.elapsed().as_secs_f64();

    fs::create_dir_all(&out)?;
    let output = out.join(RESTORED_FILE);
    save_video(&output, &video)?;
    if !dumps.is_empty() {
        let dir = out.join("caches");
        fs::create_dir_all(&dir)?;
        for (k, set) in dumps.iter().enumerate() {
            for cache in set {
                write_cache(&dir.join(format!("segment{k:03}_block{}.amc", cache.block_id())), cache)?;
            }
        }
    }
    let timing = serde_json::json!({ "runtime_s": runtime_s });
    fs::write(out.join(TIMING_FILE), timing.to_string())?;
    let mut extra = Map::new();
    extra.insert("run.checkpoint_hash".into(), Value::from(file_hash(ckpt)?));
    extra.insert("run.sampler_seed".into(), Value::from(sampler.seed));
    write_run_file(&out, "infer", cfg, extra)?;
    Ok(InferSummary {
        output,
        segments: plan.len(),
        peak_cache_bytes: peak,
        runtime_s,
    })
}

fn write_cache(path: &Path, cache: &MemoryCache) -> Result<()> {
    cache.write_snapshot(std::io::BufWriter::new(fs::File::create(path)?))
}

/// Runtime recorded by `infer` next to a restored video, if any.
fn recorded_runtime(input: &Path) -> f64 {
    let path = input.with_file_name(TIMING_FILE);
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v["runtime_s"].as_f64())
        .unwrap_or(0.0)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricReport> {
    let out = required(&cfg.paths.out, "--out")?.to_path_buf();
    let input = required(&cfg.paths.input, "--input")?;
    let flow_path = cfg
        .paths
        .flow
        .as_deref()
        .ok_or_else(|| Error::Data("warping error needs a flow container (--flow)".into()))?;
    let video = load_video(input)?;
    let flow = load_video(flow_path)?;
    let reference = cfg.paths.reference.as_deref().map(load_video).transpose()?;
    let psnr_db = reference.as_ref().map(|r| psnr(&video, r)).transpose()?;
    let ewarp = warping_error(&video, &flow)?;
    let video_id = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let report = MetricReport {
        rows: vec![MetricRow {
            video_id,
            psnr_db,
            ewarp_e3: ewarp * 1e3,
            runtime_s: recorded_runtime(input),
        }],
    };
    fs::create_dir_all(&out)?;
    fs::write(out.join(METRICS_FILE), report.to_csv())?;
    for &row in &cfg.eval.profile_rows {
        save_ppm(
            out.join(format!("profile_row{row:03}.ppm")),
            &temporal_profile(&video, row)?,
        )?;
        if let Some(r) = &reference {
            save_ppm(
                out.join(format!("profile_row{row:03}_reference.ppm")),
                &temporal_profile(r, row)?,
            )?;
        }
    }
    write_run_file(&out, "eval", cfg, Map::new())?;
    Ok(report)
}

/// Thread count from `LIFTVSR_THREADS`, falling back to the config value.
pub fn thread_limit(cfg: &RunConfig) -> Option<usize> {
    std::env::var("LIFTVSR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .or(cfg.threads)
        .filter(|&n| n > 0)
}

/// Parses, dispatches and reports; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = cli.command.overrides().resolve().and_then(|cfg| {
        if let Some(n) = thread_limit(&cfg) {
            // Only the first call can configure the global pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        match &cli.command {
            Command::Gen(_) => cmd_gen(&cfg).map(|p| format!("wrote dataset to {}", p.display())),
            Command::Train(_) => cmd_train(&cfg).map(|s| {
                format!(
                    "trained {} steps, final loss {:.4}, checkpoint {} ({})",
                    s.losses.len(),
                    s.losses.last().copied().unwrap_or(f64::NAN),
                    s.checkpoint.display(),
                    &s.checkpoint_hash[..12]
                )
            }),
            Command::Infer(_) => cmd_infer(&cfg).map(|s| {
                format!(
                    "restored {} segments in {:.2}s -> {}",
                    s.segments,
                    s.runtime_s,
                    s.output.display()
                )
            }),
            Command::Eval(_) => cmd_eval(&cfg).map(|r| r.to_csv()),
        }
    });
    match result {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("segvsr {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
