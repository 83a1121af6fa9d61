//! The staged workflow: train a base model, graft a new feature source onto
//! its aggregator, train an adaptor, retrain the aggregator; plus inference
//! and evaluation.

mod adam;
mod checkpoint;
mod config;
mod sample;
mod train;

pub use adam::{Adam, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{head_from_kv, head_to_kv, load_checkpoint, save_checkpoint};
pub use config::{PipelineConfig, Stage};
pub use sample::{from_grid, to_grid, StereoSample, GRID};
pub use train::{
    base_model, evaluate, graft, mean_metrics, model_input, run_inference, train_stage,
    write_loss_csv, ExternalFeatures, FeatureSource, LossRecord, SampleMetrics, StageOutcome,
};
