//! Experiment configuration, stored as TOML with `[model]`, `[data]` and
//! `[federation]` sections.
//!
//! ```toml
//! output_dir = "runs/desk"
//!
//! [model]
//! image_size = 16
//! patch_size = 4
//! embed_dim = 32
//! layers = 4
//! prompt_len = 8
//! activation = "tanh"
//! pretrain = true
//!
//! [data]
//! clients = 5
//! samples_per_client = 24
//!
//! [[data.protocols]]
//! acceleration = 2.0
//! noise_std = 0.01
//! gain = 1.0
//! offset = 0.0
//!
//! [federation]
//! mode = "fedpr"
//! gamma_percent = 80.0
//! ```
//!
//! Every key has a default, so partial files are valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::{Execution, FederationConfig, ProjectionTarget, TrainMode};
use crate::promptmodel::{Activation, ModelDims};

/// Largest seed TOML can carry (its integers are signed 64-bit).
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub prompt_len: usize,
    pub activation: Activation,
    /// Train the backbone on the source set before federation.
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_samples: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::DESK;
        Self {
            image_size: d.image_size,
            patch_size: d.patch_size,
            embed_dim: d.embed_dim,
            layers: d.layers,
            prompt_len: d.prompt_len,
            activation: Activation::Tanh,
            pretrain: true,
            pretrain_epochs: 400,
            pretrain_lr: 0.2,
            pretrain_samples: 96,
            init_seed: 1,
        }
    }
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            layers: self.layers,
            prompt_len: self.prompt_len,
        }
    }
}

/// Acquisition protocol of one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub acceleration: f64,
    pub noise_std: f64,
    /// Ground truth is `gain · y + offset`.
    pub gain: f64,
    pub offset: f64,
}

impl Protocol {
    fn validate(&self, what: &str) -> Result<()> {
        let ok = self.acceleration > 1.0
            && self.acceleration.is_finite()
            && self.noise_std >= 0.0
            && self.noise_std.is_finite()
            && self.gain.is_finite()
            && self.gain != 0.0
            && self.offset.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {what} protocol {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Number of participating clients `K`.
    pub clients: usize,
    pub samples_per_client: usize,
    pub train_fraction: f64,
    pub center_fraction: f64,
    /// Gaussian blobs per synthetic image.
    pub blobs: usize,
    pub seed: u64,
    /// Client `k` uses `protocols[k % len]`.
    pub protocols: Vec<Protocol>,
    /// Protocol of the out-of-federation site, absent from `protocols`.
    pub held_out: Protocol,
    /// Protocols pooled into the pretraining source set.
    pub sources: Vec<Protocol>,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = |acceleration, noise_std, gain, offset| Protocol {
            acceleration,
            noise_std,
            gain,
            offset,
        };
        Self {
            clients: 5,
            samples_per_client: 24,
            train_fraction: 0.7,
            center_fraction: 0.125,
            blobs: 4,
            seed: 7,
            protocols: vec![
                p(2.0, 0.01, 1.0, 0.0),
                p(3.0, 0.02, 0.8, 0.1),
                p(4.0, 0.01, 1.2, -0.1),
                p(3.0, 0.03, 1.0, 0.2),
                p(2.5, 0.02, 0.7, 0.0),
            ],
            held_out: p(5.0, 0.02, 0.9, 0.05),
            sources: vec![
                p(2.0, 0.01, 1.0, 0.0),
                p(3.0, 0.01, 1.0, 0.0),
                p(4.0, 0.01, 1.0, 0.0),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma_percent: f64,
    pub mode: TrainMode,
    pub projection_target: ProjectionTarget,
    pub momentum: f64,
    pub count_basis_scalars: bool,
    pub seed: u64,
    /// Train the clients of a round on a thread pool.
    pub parallel: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        let c = FederationConfig::default();
        Self {
            rounds: c.rounds,
            local_epochs: c.local_epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            gamma_percent: c.gamma_percent,
            mode: c.mode,
            projection_target: c.projection_target,
            momentum: c.momentum,
            count_basis_scalars: c.count_basis_scalars,
            seed: 11,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub federation: FederationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            data: DataSection::default(),
            federation: FederationSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Scaled-down run used by the acceptance suite: `Z = 20`, `T = 3`.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.federation.rounds = 20;
        c.federation.local_epochs = 3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .dims()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let m = &self.model;
        if m.pretrain && (m.pretrain_epochs == 0 || m.pretrain_samples == 0) {
            return Err(Error::Config(
                "pretraining needs positive epochs and samples".into(),
            ));
        }
        if !m.pretrain_lr.is_finite() || m.pretrain_lr <= 0.0 {
            return Err(Error::Config(format!(
                "invalid pretraining learning rate {}",
                m.pretrain_lr
            )));
        }
        let d = &self.data;
        if d.clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        if d.samples_per_client < 2 {
            return Err(Error::Config(
                "each client needs at least two samples".into(),
            ));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {}",
                d.train_fraction
            )));
        }
        if !(d.center_fraction > 0.0 && d.center_fraction < 1.0) {
            return Err(Error::Config(format!(
                "center fraction must lie in (0, 1), got {}",
                d.center_fraction
            )));
        }
        if d.blobs == 0 {
            return Err(Error::Config("at least one blob per image".into()));
        }
        if d.protocols.is_empty() {
            return Err(Error::Config("at least one client protocol".into()));
        }
        for p in &d.protocols {
            p.validate("client")?;
        }
        d.held_out.validate("held-out")?;
        if d.sources.is_empty() {
            return Err(Error::Config("at least one source protocol".into()));
        }
        for p in &d.sources {
            p.validate("source")?;
        }
        if d.protocols.contains(&d.held_out) {
            return Err(Error::Config(
                "the held-out protocol must not be used by a training client".into(),
            ));
        }
        for seed in [m.init_seed, d.seed, self.federation.seed] {
            if seed > MAX_SEED {
                return Err(Error::Config(format!(
                    "seed {seed} exceeds the supported maximum {MAX_SEED}"
                )));
            }
        }
        self.federation_config().validate()
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        let threads = std::env::var("FEDNULL_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0);
        FederationConfig {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            lr: f.lr,
            batch_size: f.batch_size,
            gamma_percent: f.gamma_percent,
            mode: f.mode,
            projection_target: f.projection_target,
            momentum: f.momentum,
            count_basis_scalars: f.count_basis_scalars,
            seed: f.seed,
            execution: if f.parallel {
                Execution::Parallel { threads }
            } else {
                Execution::Serial
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Hex SHA-256 of the serialized snapshot.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
