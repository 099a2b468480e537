//! Federated visual-prompt learning with null-space projected local updates.
//!
//! Clients fine-tune only small per-layer prompt blocks of a frozen backbone
//! on undersampled MRI reconstructions. After each aggregation the server
//! eigendecomposes the uncentered covariance of the global prompts and
//! broadcasts the span of its smallest eigenvalues; the next round's local
//! steps are projected into that span so the principal directions of the
//! global prompts are left untouched.

pub mod error;
pub mod federation;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod mri;
pub mod nullspace;
pub mod promptmodel;

pub use error::{Error, Result};
pub use federation::{
    aggregate, evaluate, local_update, run_federation, server_round, ClientShard, FederationConfig,
    FederationState, ProjectionTarget, RoundRecord, TrainMode,
};
pub use harness::ExperimentConfig;
pub use metrics::{CommLedger, MetricReport};
pub use mri::{Image, SamplingMask};
pub use nalgebra::DMatrix;
pub use nullspace::NullSpaceBasis;
pub use promptmodel::{Activation, Backbone, ModelDims, PromptSet};
