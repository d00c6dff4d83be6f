//! Checkpoints: a binary tensor table (weights and optimiser moments) plus a
//! JSON sidecar with the model configuration and training position.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{BetaSchedule, NoiseSchedule, TrainOptions, Trainer};
use crate::error::{Error, Result};
use crate::io::{file_hash, read_tensors, write_tensors};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: DenoiserConfig,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub seed: u64,
    pub step: u64,
    pub options: TrainOptions,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` and its sidecar; returns the SHA-256 of the binary file.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<String> {
    let (beta_start, beta_end) = match trainer.schedule.betas {
        BetaSchedule::Linear { start, end } => (start, end),
        BetaSchedule::Custom => return Err(Error::Config("only linear schedules can be checkpointed".into())),
    };
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for (_, p) in trainer.store.iter() {
        entries.push((p.name.clone(), &p.tensor));
    }
    for (id, p) in trainer.store.iter() {
        let (m, v) = trainer.optimizer.moments(id);
        entries.push((format!("adam.m/{}", p.name), m));
        entries.push((format!("adam.v/{}", p.name), v));
    }
    write_tensors(BufWriter::new(File::create(path)?), &entries)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        model: trainer.model.config.clone(),
        schedule_steps: trainer.schedule.len(),
        beta_start,
        beta_end,
        lr: trainer.optimizer.lr,
        seed: trainer.seed,
        step: trainer.steps_taken(),
        options: trainer.options,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    file_hash(path)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text =
        std::fs::read_to_string(&side).map_err(|e| Error::Data(format!("cannot read {}: {e}", side.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Version(format!("unreadable checkpoint metadata: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Version(format!(
            "checkpoint format {}, expected {CHECKPOINT_FORMAT}",
            meta.format
        )));
    }
    Ok(meta)
}

/// Rebuilds a trainer with weights and optimiser state restored.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let meta = read_meta(path)?;
    let schedule = NoiseSchedule::linear_betas(meta.schedule_steps, meta.beta_start, meta.beta_end)?;
    let mut trainer = Trainer::new(meta.model.clone(), schedule, meta.lr, meta.seed, meta.options)?;
    let table = read_tensors(BufReader::new(File::open(path)?))?;
    let lookup = |name: &str| table.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let mut first = Vec::new();
    let mut second = Vec::new();
    let names: Vec<String> = trainer.store.iter().map(|(_, p)| p.name.clone()).collect();
    for (p, name) in trainer.store.iter_mut().zip(&names) {
        let missing = || Error::Version(format!("checkpoint has no tensor {name:?}"));
        let w = lookup(name).ok_or_else(missing)?;
        if w.shape() != p.tensor.shape() {
            return Err(Error::Version(format!(
                "tensor {name:?} has shape {:?}, model expects {:?}",
                w.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = w.clone();
        first.push(lookup(&format!("adam.m/{name}")).ok_or_else(missing)?.clone());
        second.push(lookup(&format!("adam.v/{name}")).ok_or_else(missing)?.clone());
    }
    if table.len() != 3 * names.len() {
        return Err(Error::Version(
            "checkpoint holds tensors the model does not have".into(),
        ));
    }
    trainer.optimizer.restore(meta.step, first, second)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            blocks: 1,
            dim: 8,
            heads: 2,
            image_height: 8,
            image_width: 8,
            segment_length: 2,
            dta_block_interval: Some(1),
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn roundtrip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut t = Trainer::new(
            tiny(),
            NoiseSchedule::linear(50).unwrap(),
            1e-3,
            3,
            TrainOptions::default(),
        )
        .unwrap();
        let v = Tensor::full(vec![4, 8, 8, 3], 0.5);
        t.step(&v, &v).unwrap();
        let hash = save_checkpoint(&path, &t).unwrap();
        assert_eq!(hash.len(), 64);
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.steps_taken(), 1);
        for ((_, a), (_, b)) in t.store.iter().zip(back.store.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn mismatched_model_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let t = Trainer::new(
            tiny(),
            NoiseSchedule::linear(50).unwrap(),
            1e-3,
            3,
            TrainOptions::default(),
        )
        .unwrap();
        save_checkpoint(&path, &t).unwrap();
        let mut meta = read_meta(&path).unwrap();
        meta.model.dim = 16;
        std::fs::write(sidecar_path(&path), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version(_))));
    }
}
