//! Configuration, synthetic data, experiment runs, sweeps and reports.

pub mod config;
pub mod experiment;
pub mod svg;
pub mod synth;

pub use config::{DataSection, ExperimentConfig, FederationSection, ModelSection, Protocol};
pub use experiment::{
    csv_header, emit_report, gamma_sweep, prepare, rounds_sweep, run_experiment, train, GammaRow,
    Prepared, RoundsRow, RunArtifact, Summary,
};
pub use synth::{source_set, synth_clients};
