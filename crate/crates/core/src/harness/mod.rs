//! Datasets, experiment configuration, sweeps, and result files.

pub mod config;
pub mod data;
pub mod experiment;
pub mod sweep;

pub use config::{DatasetConfig, ExperimentConfig, SweepConfig, SweepValue};
pub use experiment::{run_on, run_point, ReconstructionOutput, RunArtifacts};
pub use sweep::{mask_wall_ms, run_sweep, write_csv, write_csv_file, ResultRow, CSV_HEADER};
