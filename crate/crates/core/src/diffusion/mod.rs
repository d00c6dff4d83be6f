pub mod color;
pub mod plan;
pub mod sampler;
pub mod schedule;
pub mod tiling;
pub mod training;

pub use color::color_correct;
pub use plan::{Segment, SegmentPlan};
pub use sampler::{
    blend_segments, ddim_sample, sample_segmentwise, segment_noise, CacheMode, SampleOptions, SampleReport,
    SamplerConfig, SamplerKind,
};
pub use schedule::{BetaSchedule, NoiseSchedule};
pub use tiling::{tile_and_merge, TileLayout};
pub use training::{epoch_order, fit, training_loss, TrainOptions, Trainer};
