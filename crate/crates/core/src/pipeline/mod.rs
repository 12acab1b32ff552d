//! Clip construction, synthetic data, loss, optimizer, metrics, checkpoints,
//! and the training loop.

pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod data;
pub mod encoder;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use clip::{build_clip, BBox, ClipSpec};
pub use config::{config_hash, DataConfig, OptimConfig, TrainConfig, TrainSettings};
pub use data::{synth_clip, synth_dataset, Motion, SynthSpec, SyntheticClip, SyntheticSample};
pub use encoder::StubEncoder;
pub use loss::heatmap_loss;
pub use metrics::{decode_and_pck, decode_heatmaps, PckTally};
pub use optim::{adamw_step, AdamState, AdamWConfig, LrSchedule, LrStep, StepOutcome};
pub use train::{evaluate, predict, train, EpochMetrics, EvalReport, StopReason, TrainOutcome, Trainer, CHECKPOINT_FILE, METRICS_FILE};
