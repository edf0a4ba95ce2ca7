//! Hierarchical capsule regression for subjects exposed to several
//! simultaneous events.
//!
//! Layout, bottom up: [`numeric`] (tensors, tape autodiff, gradient checks),
//! [`capsule`] (feature capsules and dynamic routing), [`attention`]
//! (cluster aggregation), [`model`] (the full network and its objective),
//! [`datagen`] (synthetic data), and [`train`], [`eval`], [`baseline`],
//! [`ablation`], [`report`] for experiments.

pub mod ablation;
pub mod attention;
pub mod baseline;
pub mod capsule;
pub mod config_file;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod params;
pub mod report;
pub mod train;

pub use ablation::{ablation_suite, ablation_suite_modes, AblationTable};
pub use attention::{Aggregation, EventCluster};
pub use baseline::{run_baselines, BaselineReports};
pub use config_file::RunConfig;
pub use datagen::{
    enumerate_clusters, generate, split, Dataset, Split, SubjectRecord, SyntheticConfig,
};
pub use error::{HapError, Result};
pub use eval::{evaluate, mape, EvalReport, GroupStats, MapeStats};
pub use model::{AblationMode, Checkpoint, HapNet, ModelConfig};
pub use numeric::{Shape, Tensor};
pub use params::{ParamId, ParamStore};
pub use train::{train, OptimizerKind, TrainConfig, TrainLog, TrainOutcome};
