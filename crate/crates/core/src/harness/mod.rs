//! Synthetic data, training, tracking, metrics and their on-disk formats.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod runlog;
pub mod selftest;
pub mod synth;
pub mod tracker;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{TrackerConfig, TrainConfig, ENV_OUT, ENV_SEED};
pub use dataset::{find_sequences, read_sequence, write_sequence};
pub use metrics::{
    center_error, iou, max_metrics, norm_precision_rate, precision_rate, success_rate, MetricSummary, PixelBox,
};
pub use model::{forward_frame, Model};
pub use runlog::{FrameRecord, RunHeader, RunLog};
pub use synth::{gen_sequence, SequenceRecord, SequenceSpec};
pub use tracker::run_tracker;
pub use train::{evaluate_loss, train, train_with, TrainLog};
