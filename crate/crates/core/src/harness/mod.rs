//! Outer-loop meta-training, evaluation, sweeps, checkpointing, and metrics.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod optimizer;
pub mod params;
pub mod run;
pub mod seeds;
pub mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{OptimizerConfig, OptimizerKind, TaskKind, TrainConfig};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use metrics::{metrics_to_csv, MetricsRecord};
pub use optimizer::{outer_update, OptimizerState};
pub use params::{init_params, project_params, NamedArrays, ParamSet};
pub use run::{run_episode, EpisodeData, EpisodeOutcome, RunMode};
pub use train::{
    evaluate, make_episode, prepare_character_dataset, sweep_cues, sweep_to_csv, train,
    CharDataset, EvalResult, SweepRow, TrainOutcome,
};
