//! Synthetic LQ/HQ dataset generation and on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::degrade::{degrade, DegradationParams, DegradationRecipe};
use crate::data::resize::upsample;
use crate::data::scene::{generate_scene, Motion, SyntheticScene};
use crate::error::{Error, Result};
use crate::io::{load_video, save_video};
use crate::rng::{derive_seed, stream};
use crate::tensor::FrameStack;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Largest per-frame displacement in HQ pixels.
    pub max_speed: f64,
    pub recipe: DegradationRecipe,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 16,
            frames: 16,
            height: 32,
            width: 32,
            max_speed: 1.5,
            recipe: DegradationRecipe::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub scene: SyntheticScene,
    pub degradation: DegradationParams,
    pub hq: FrameStack,
    pub lq: FrameStack,
    pub flow: FrameStack,
}

impl Sample {
    /// Bicubic-upsampled LQ video at HQ resolution, used as conditioning.
    pub fn condition(&self) -> Result<FrameStack> {
        upsample(&self.lq, self.degradation.scale)
    }
}

/// Builds scene `index` of the dataset; independent of every other index.
pub fn generate_sample(config: &DatasetConfig, index: usize) -> Result<Sample> {
    let mut rng = stream(config.seed, "scene", index as u64);
    let scene = SyntheticScene {
        height: config.height,
        width: config.width,
        frames: config.frames,
        motion: Motion::random(&mut rng, config.max_speed),
        seed: derive_seed(config.seed, "scene-texture", index as u64),
    };
    let degradation = config
        .recipe
        .sample(&mut rng, derive_seed(config.seed, "scene-degrade", index as u64));
    let video = generate_scene(&scene)?;
    let lq = degrade(&video.hq, &degradation)?;
    Ok(Sample {
        id: format!("scene_{index:04}"),
        scene,
        degradation,
        hq: video.hq,
        lq,
        flow: video.flow,
    })
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<Sample>> {
    (0..config.scenes)
        .into_par_iter()
        .map(|i| generate_sample(config, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub hq: String,
    pub lq: String,
    pub flow: String,
    pub scene: SyntheticScene,
    pub degradation: DegradationParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

/// Writes three containers per sample plus `manifest.json`.
pub fn write_dataset(dir: &Path, config: &DatasetConfig, samples: &[Sample]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let names = [
            format!("{}_hq.lvsr", s.id),
            format!("{}_lq.lvsr", s.id),
            format!("{}_flow.lvsr", s.id),
        ];
        for (name, t) in names.iter().zip([&s.hq, &s.lq, &s.flow]) {
            save_video(dir.join(name), t)?;
        }
        let [hq, lq, flow] = names;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            hq,
            lq,
            flow,
            scene: s.scene.clone(),
            degradation: s.degradation.clone(),
        });
    }
    let manifest = Manifest {
        config: config.clone(),
        entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(Sample {
                id: e.id.clone(),
                scene: e.scene.clone(),
                degradation: e.degradation.clone(),
                hq: load_video(dir.join(&e.hq))?,
                lq: load_video(dir.join(&e.lq))?,
                flow: load_video(dir.join(&e.flow))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
