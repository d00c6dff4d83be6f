pub mod dataset;
pub mod degrade;
pub mod resize;
pub mod scene;

pub use dataset::{generate_dataset, generate_sample, load_dataset, write_dataset, DatasetConfig, Manifest, Sample};
pub use degrade::{degrade, DegradationParams, DegradationRecipe};
pub use resize::{downsample, gaussian_blur, resize_bicubic, upsample};
pub use scene::{generate_scene, Motion, SceneVideo, SyntheticScene};
