//! Instance generation, experiment sweeps and result files.

pub mod emit;
pub mod experiment;
pub mod instance;
pub mod verify;

pub use emit::{emit, read_json, write_csv, write_json, OutputFormat};
pub use experiment::{run_experiment, run_trial, ExperimentConfig, ExperimentResult, TrialRecord, TrialStatus};
pub use instance::{make_instance, InstanceSpec, NoiseModel, ProblemInstance, TransformClass};
