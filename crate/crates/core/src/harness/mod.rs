//! Experiment plumbing: synthetic data, configs, persistence, training and
//! evaluation loops, and the finite-difference gradient suite.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod fmat;
pub mod gradcheck;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, Manifest, CONFIG_COPY, MANIFEST};
pub use config::{ExperimentConfig, ModelWidths};
pub use data::{generate_dataset, read_dataset, write_dataset, Dataset, MapKind, Sample, SyntheticDatasetSpec};
pub use fmat::{decode_fmat, encode_fmat, read_fmat, write_fmat};
pub use gradcheck::{run_gradcheck_suite, GradCheckSuite};
pub use train::{
    evaluate, evaluate_detailed, train, train_with, Metrics, Persistence, SolveDiagnostics, TrainOutcome, EVAL_LOG,
    FINAL_CHECKPOINT, FINAL_METRICS, LAST_GOOD_CHECKPOINT, METRICS_LOG,
};
