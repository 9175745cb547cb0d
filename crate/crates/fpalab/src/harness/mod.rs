//! Experiment harness: datasets on disk, synthetic data, evaluation subsets,
//! the transfer matrix, gate ablations, paired timing, and run artifacts.

pub mod ablate;
pub mod bench;
pub mod datasets;
pub mod report;
pub mod subset;
pub mod synth;
pub mod transfer;

pub use datasets::{load_test, load_train, standardize, DataFormat};
pub use transfer::{ExperimentConfig, ModelSet, RunOutcome, VariantSpec};
