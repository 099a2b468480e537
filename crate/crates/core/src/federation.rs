//! Server and client loop: broadcast, local prompt updates, weighted
//! aggregation, then the null space of the new global prompts for the next
//! round.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{count_communication, CommLedger, CommMode, MetricReport, ModelSize};
use crate::mri::{Image, SamplingMask};
use crate::nullspace::{null_space_of, project_update, NullSpaceBasis};
use crate::promptmodel::{backward, forward, loss_l1, Backbone, BackboneGrad, PromptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Fine-tunes and communicates the whole model.
    FedavgFft,
    /// Prompt tuning with unconstrained local steps.
    PromptOnly,
    /// Prompt tuning with steps projected into the global prompts' null space.
    Fedpr,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [
        TrainMode::FedavgFft,
        TrainMode::PromptOnly,
        TrainMode::Fedpr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::FedavgFft => "fedavg_fft",
            TrainMode::PromptOnly => "prompt_only",
            TrainMode::Fedpr => "fedpr",
        }
    }

    pub fn comm_mode(self) -> CommMode {
        match self {
            TrainMode::FedavgFft => CommMode::FullFinetune,
            _ => CommMode::PromptOnly,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What gets projected before the step `P ← P − η·ΔP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionTarget {
    /// `ΔP = ∇ℓ · Π`.
    Gradient,
    /// `ΔP = P · Π`, the prompt itself.
    Prompt,
}

/// How clients of one round are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Serial,
    /// `threads == 0` lets rayon pick.
    Parallel {
        threads: usize,
    },
}

/// One simulated hospital.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub id: usize,
    /// `(undersampled x, fully sampled y)`.
    pub train_pairs: Vec<(Image, Image)>,
    pub test_pairs: Vec<(Image, Image)>,
    pub mask: SamplingMask,
    pub noise_std: f64,
    /// `(gain, offset)` applied to the ground truth.
    pub contrast: (f64, f64),
    /// Seed the shard was generated from.
    pub seed: u64,
}

impl ClientShard {
    pub fn sample_count(&self) -> usize {
        self.train_pairs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma_percent: f64,
    pub mode: TrainMode,
    pub projection_target: ProjectionTarget,
    /// Heavy-ball momentum, honoured by `fedavg_fft` only.
    pub momentum: f64,
    /// Count the broadcast U₂ scalars in the communication ledger.
    pub count_basis_scalars: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 10,
            lr: 0.1,
            batch_size: 8,
            gamma_percent: 80.0,
            mode: TrainMode::Fedpr,
            projection_target: ProjectionTarget::Gradient,
            momentum: 0.0,
            count_basis_scalars: false,
            seed: 0,
            execution: Execution::Serial,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=100.0).contains(&self.gamma_percent) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, 100], got {}",
                self.gamma_percent
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// γ actually applied: the unconstrained modes update in the full space.
    pub fn effective_gamma(&self) -> f64 {
        match self.mode {
            TrainMode::Fedpr => self.gamma_percent,
            _ => 100.0,
        }
    }
}

/// Knobs of a single client's local training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSettings {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub projection_target: ProjectionTarget,
    pub momentum: f64,
}

impl From<&FederationConfig> for LocalSettings {
    fn from(c: &FederationConfig) -> Self {
        Self {
            mode: c.mode,
            epochs: c.local_epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            projection_target: c.projection_target,
            momentum: c.momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub round: usize,
    pub client_id: usize,
    pub step: usize,
}

/// Sees every applied prompt update `η·ΔP`, layer by layer.
pub trait StepObserver: Sync {
    fn on_step(
        &self,
        ctx: StepContext,
        layer: usize,
        applied: &DMatrix<f64>,
        basis: Option<&NullSpaceBasis>,
    );
}

pub struct NoObserver;

impl StepObserver for NoObserver {
    fn on_step(&self, _: StepContext, _: usize, _: &DMatrix<f64>, _: Option<&NullSpaceBasis>) {}
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub prompts: PromptSet,
    /// Locally fine-tuned backbone, `fedavg_fft` only.
    pub backbone: Option<Backbone>,
    /// Mean mini-batch loss over all local steps.
    pub train_loss: f64,
    pub steps: usize,
}

/// Local training of one client starting from the broadcast prompts.
///
/// `bases == None` means no covariance exists yet and the projector is the
/// identity. The backbone is only touched in `fedavg_fft`, on a local copy.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    client: &ClientShard,
    start: &PromptSet,
    backbone: &Backbone,
    bases: Option<&[NullSpaceBasis]>,
    settings: &LocalSettings,
    seed: u64,
    round: usize,
    observer: &dyn StepObserver,
) -> Result<LocalOutcome> {
    if settings.epochs == 0 || settings.batch_size == 0 {
        return Err(Error::invalid(
            "local epochs and batch size must be positive",
        ));
    }
    if settings.lr.is_nan() || settings.lr < 0.0 {
        return Err(Error::invalid(format!(
            "invalid learning rate {}",
            settings.lr
        )));
    }
    if client.train_pairs.is_empty() {
        return Err(Error::invalid(format!(
            "client {} has no training data",
            client.id
        )));
    }
    if let Some(b) = bases {
        if b.len() != start.layers.len() {
            return Err(Error::invalid(
                "one null-space basis per prompt layer expected",
            ));
        }
    }

    let full_model = settings.mode == TrainMode::FedavgFft;
    let projected = settings.mode == TrainMode::Fedpr;
    let mut prompts = start.clone();
    let mut local_backbone = full_model.then(|| backbone.clone());
    let mut prompt_velocity = full_model.then(|| PromptSet::zeros(&backbone.dims));
    let mut backbone_velocity: Option<BackboneGrad> = full_model.then(|| backbone.zero_grad());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..client.train_pairs.len()).collect();
    let mut loss_sum = 0.0;
    let mut step = 0;

    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<(Image, Image)> = chunk
                .iter()
                .map(|&i| client.train_pairs[i].clone())
                .collect();
            let model = local_backbone.as_ref().unwrap_or(backbone);
            let grads = backward(&batch, &prompts, model, full_model).map_err(|e| match e {
                Error::NumericalFailure(m) => Error::numerical(format!(
                    "round {round}, client {}, step {step}: {m}",
                    client.id
                )),
                other => other,
            })?;
            loss_sum += grads.loss;

            let ctx = StepContext {
                round,
                client_id: client.id,
                step,
            };
            for (i, g) in grads.prompts.layers.iter().enumerate() {
                let basis = if projected {
                    bases.map(|b| &b[i])
                } else {
                    None
                };
                let delta = match basis {
                    Some(b) => {
                        let candidate = match settings.projection_target {
                            ProjectionTarget::Gradient => g,
                            ProjectionTarget::Prompt => &prompts.layers[i],
                        };
                        project_update(candidate, b)?
                    }
                    None => g.clone(),
                };
                let delta = match prompt_velocity.as_mut() {
                    Some(v) if settings.momentum > 0.0 => {
                        v.layers[i] = &v.layers[i] * settings.momentum + &delta;
                        v.layers[i].clone()
                    }
                    _ => delta,
                };
                let applied = delta * settings.lr;
                observer.on_step(ctx, i, &applied, basis);
                prompts.layers[i] -= &applied;
            }

            if let (Some(model), Some(g)) = (local_backbone.as_mut(), grads.backbone.as_ref()) {
                match backbone_velocity.as_mut() {
                    Some(v) if settings.momentum > 0.0 => {
                        v.scale(settings.momentum);
                        v.add_scaled(g, 1.0);
                        model.apply_gradient(v, settings.lr);
                    }
                    _ => model.apply_gradient(g, settings.lr),
                }
            }
            step += 1;
        }
    }

    if !prompts.is_finite() || local_backbone.as_ref().is_some_and(|b| !b.is_finite()) {
        return Err(Error::numerical(format!(
            "round {round}, client {}: parameters diverged",
            client.id
        )));
    }
    Ok(LocalOutcome {
        prompts,
        backbone: local_backbone,
        train_loss: loss_sum / step as f64,
        steps: step,
    })
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `Σ countₖ·valuesₖ[i] / Σ countₖ`, accumulated in double-double and
/// rounded once.
fn weighted_mean_slices(parts: &[(&[f64], usize)]) -> Result<Vec<f64>> {
    let len = parts.first().map(|p| p.0.len()).unwrap_or(0);
    if parts.iter().any(|p| p.0.len() != len) {
        return Err(Error::invalid("aggregated parameters differ in shape"));
    }
    let total: usize = parts.iter().map(|p| p.1).sum();
    if total == 0 {
        return Err(Error::invalid("total sample count is zero"));
    }
    let total = total as f64;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let (mut hi, mut lo) = (0.0_f64, 0.0_f64);
        for (values, count) in parts {
            let c = *count as f64;
            let p = values[i] * c;
            let p_err = values[i].mul_add(c, -p);
            let (s, e) = two_sum(hi, p);
            hi = s;
            lo += e + p_err;
        }
        let (hi, lo) = two_sum(hi, lo);
        // (hi + lo) / total in double-double, then round
        let q = hi / total;
        let r = q.mul_add(-total, hi) + lo;
        out.push(q + r / total);
    }
    Ok(out)
}

fn weighted_mean_matrices(parts: &[(&DMatrix<f64>, usize)]) -> Result<DMatrix<f64>> {
    let shape = parts
        .first()
        .map(|p| p.0.shape())
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if parts.iter().any(|p| p.0.shape() != shape) {
        return Err(Error::invalid("aggregated matrices differ in shape"));
    }
    let slices: Vec<(&[f64], usize)> = parts.iter().map(|(m, c)| (m.as_slice(), *c)).collect();
    Ok(DMatrix::from_vec(
        shape.0,
        shape.1,
        weighted_mean_slices(&slices)?,
    ))
}

/// Sample-count weighted average of client prompts.
pub fn aggregate(updates: &[(&PromptSet, usize)]) -> Result<PromptSet> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if updates.iter().any(|(p, _)| !p.same_shape(first)) {
        return Err(Error::invalid("prompt sets differ in shape"));
    }
    let layers = (0..first.layers.len())
        .map(|i| {
            let parts: Vec<_> = updates.iter().map(|(p, c)| (&p.layers[i], *c)).collect();
            weighted_mean_matrices(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSet { layers })
}

/// Sample-count weighted average of client backbones.
pub fn aggregate_backbones(updates: &[(&Backbone, usize)]) -> Result<Backbone> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if updates.iter().any(|(b, _)| b.dims != first.dims) {
        return Err(Error::invalid("backbones differ in shape"));
    }
    let mut out = (*first).clone();
    let count = first.parameters().count();
    for (k, dst) in out.parameters_mut().enumerate().take(count) {
        let parts: Vec<_> = updates
            .iter()
            .map(|(b, c)| (b.parameters().nth(k).expect("same layout"), *c))
            .collect();
        *dst = weighted_mean_matrices(&parts)?;
    }
    Ok(out)
}

/// Per-client telemetry of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub train_loss: f64,
    pub steps: usize,
    /// Global model on the client's test split.
    pub in_federation: MetricReport,
    /// Mean L1 loss of the global model on the client's test split.
    pub global_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based index of the completed round.
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
    pub out_of_federation: Option<MetricReport>,
    /// Residual ratio R per prompt layer of the bases computed this round.
    pub residual_ratios: Vec<f64>,
    pub scalars_up: u64,
    pub scalars_down: u64,
}

/// Global model quality on every client and on the held-out shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub in_federation: Vec<MetricReport>,
    pub global_losses: Vec<f64>,
    pub out_of_federation: Option<MetricReport>,
}

impl Evaluation {
    pub fn mean_in_federation(&self) -> MetricReport {
        MetricReport::mean(&self.in_federation).expect("at least one client")
    }
}

#[derive(Debug, Clone)]
pub struct FederationState {
    /// Completed rounds.
    pub round: usize,
    pub global_prompts: PromptSet,
    /// Frozen in prompt modes; averaged every round in `fedavg_fft`.
    pub backbone: Backbone,
    /// `None` until the first aggregation.
    pub bases: Option<Vec<NullSpaceBasis>>,
    pub ledger: CommLedger,
    pub history: Vec<RoundRecord>,
    /// Global prompts after each completed round.
    pub prompt_history: Vec<PromptSet>,
    /// Evaluation of the broadcast model before any training.
    pub initial_evaluation: Option<Evaluation>,
}

impl FederationState {
    pub fn new(backbone: Backbone, mode: TrainMode) -> Self {
        let dims = backbone.dims;
        let ledger = count_communication(
            mode.comm_mode(),
            ModelSize {
                prompt_scalars: dims.prompt_scalars() as u64,
                backbone_scalars: backbone.scalar_count() as u64,
            },
        );
        Self {
            round: 0,
            global_prompts: PromptSet::zeros(&dims),
            backbone,
            bases: None,
            ledger,
            history: Vec::new(),
            prompt_history: Vec::new(),
            initial_evaluation: None,
        }
    }
}

/// Independent stream per (run, round, client), so schedules cannot change
/// which random numbers a client sees.
pub fn derive_seed(base: u64, round: usize, client: usize) -> u64 {
    let mut z = base
        ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (client as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn evaluate_pairs(
    pairs: &[(Image, Image)],
    prompts: &PromptSet,
    backbone: &Backbone,
) -> Result<(MetricReport, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    let mut loss = 0.0;
    for (x, y) in pairs {
        let pred = forward(x, prompts, backbone)?;
        reports.push(MetricReport::compute(y, &pred)?);
        loss += loss_l1(&pred, y)?;
    }
    Ok((
        MetricReport::mean(&reports).expect("non-empty"),
        loss / pairs.len() as f64,
    ))
}

fn map_clients<T: Send>(
    execution: &Scheduler,
    clients: &[ClientShard],
    f: impl Fn(&ClientShard) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match execution {
        Scheduler::Serial => clients.iter().map(f).collect(),
        Scheduler::Pool(pool) => pool.install(|| clients.par_iter().map(f).collect()),
    }
}

/// In-federation metrics per client test split and out-of-federation
/// metrics on `held_out`.
pub fn evaluate(
    prompts: &PromptSet,
    backbone: &Backbone,
    clients: &[ClientShard],
    held_out: Option<&ClientShard>,
) -> Result<Evaluation> {
    evaluate_with(&Scheduler::Serial, prompts, backbone, clients, held_out)
}

fn evaluate_with(
    scheduler: &Scheduler,
    prompts: &PromptSet,
    backbone: &Backbone,
    clients: &[ClientShard],
    held_out: Option<&ClientShard>,
) -> Result<Evaluation> {
    let per_client = map_clients(scheduler, clients, |c| {
        evaluate_pairs(&c.test_pairs, prompts, backbone)
    })?;
    let out_of_federation = held_out
        .map(|h| evaluate_pairs(&h.test_pairs, prompts, backbone).map(|r| r.0))
        .transpose()?;
    Ok(Evaluation {
        in_federation: per_client.iter().map(|r| r.0).collect(),
        global_losses: per_client.iter().map(|r| r.1).collect(),
        out_of_federation,
    })
}

/// Thread pool owned by one federation run.
pub enum Scheduler {
    Serial,
    Pool(rayon::ThreadPool),
}

impl Scheduler {
    pub fn new(execution: Execution) -> Result<Self> {
        match execution {
            Execution::Serial => Ok(Scheduler::Serial),
            Execution::Parallel { threads } => rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map(Scheduler::Pool)
                .map_err(|e| Error::Config(format!("thread pool: {e}"))),
        }
    }
}

/// Everything a round needs besides the evolving state.
pub struct Federation<'a> {
    pub clients: &'a [ClientShard],
    pub held_out: Option<&'a ClientShard>,
    pub config: &'a FederationConfig,
    pub observer: &'a dyn StepObserver,
    pub scheduler: &'a Scheduler,
}

/// One broadcast, local-update, aggregate, null-space cycle.
pub fn server_round(mut state: FederationState, fed: &Federation<'_>) -> Result<FederationState> {
    let config = fed.config;
    if fed.clients.is_empty() {
        return Err(Error::invalid("no clients"));
    }
    let round = state.round + 1;
    let settings = LocalSettings::from(config);
    let bases = state.bases.as_deref();

    let outcomes = map_clients(fed.scheduler, fed.clients, |client| {
        local_update(
            client,
            &state.global_prompts,
            &state.backbone,
            bases,
            &settings,
            derive_seed(config.seed, round, client.id),
            round,
            fed.observer,
        )
    })?;

    let prompt_parts: Vec<_> = outcomes
        .iter()
        .zip(fed.clients)
        .map(|(o, c)| (&o.prompts, c.sample_count()))
        .collect();
    state.global_prompts = aggregate(&prompt_parts)?;
    if config.mode == TrainMode::FedavgFft {
        let parts: Vec<_> = outcomes
            .iter()
            .zip(fed.clients)
            .map(|(o, c)| {
                (
                    o.backbone.as_ref().expect("full fine-tune"),
                    c.sample_count(),
                )
            })
            .collect();
        state.backbone = aggregate_backbones(&parts)?;
    }

    let gamma = config.effective_gamma();
    let new_bases = state
        .global_prompts
        .layers
        .iter()
        .enumerate()
        .map(|(i, p)| {
            null_space_of(p, gamma, i).map_err(|e| match e {
                Error::NumericalFailure(m) => {
                    Error::numerical(format!("round {round}, layer {i}: {m}"))
                }
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    state.ledger.record_round(fed.clients.len());
    if config.count_basis_scalars && config.mode == TrainMode::Fedpr {
        let per_client: usize = new_bases.iter().map(|b| b.u2.len()).sum();
        state
            .ledger
            .record_extra((per_client * fed.clients.len()) as u64);
    }

    let eval = evaluate_with(
        fed.scheduler,
        &state.global_prompts,
        &state.backbone,
        fed.clients,
        fed.held_out,
    )?;
    let clients = outcomes
        .iter()
        .zip(fed.clients)
        .enumerate()
        .map(|(k, (o, c))| ClientRoundStats {
            client_id: c.id,
            train_loss: o.train_loss,
            steps: o.steps,
            in_federation: eval.in_federation[k],
            global_loss: eval.global_losses[k],
        })
        .collect();
    state.history.push(RoundRecord {
        round,
        clients,
        out_of_federation: eval.out_of_federation,
        residual_ratios: new_bases.iter().map(|b| b.residual_ratio).collect(),
        scalars_up: state.ledger.per_round_scalars_up,
        scalars_down: state.ledger.per_round_scalars_down,
    });
    state.prompt_history.push(state.global_prompts.clone());
    state.bases = Some(new_bases);
    state.round = round;
    Ok(state)
}

/// `Z` rounds from zero-initialized global prompts.
pub fn run_federation(
    clients: &[ClientShard],
    held_out: Option<&ClientShard>,
    backbone: Backbone,
    config: &FederationConfig,
    observer: &dyn StepObserver,
) -> Result<FederationState> {
    config.validate()?;
    let scheduler = Scheduler::new(config.execution)?;
    let mut state = FederationState::new(backbone, config.mode);
    state.initial_evaluation = Some(evaluate_with(
        &scheduler,
        &state.global_prompts,
        &state.backbone,
        clients,
        held_out,
    )?);
    let fed = Federation {
        clients,
        held_out,
        config,
        observer,
        scheduler: &scheduler,
    };
    for _ in 0..config.rounds {
        state = server_round(state, &fed)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptmodel::{Activation, ModelDims};
    use rand::Rng;

    const DIMS: ModelDims = ModelDims {
        image_size: 16,
        patch_size: 4,
        embed_dim: 6,
        layers: 2,
        prompt_len: 3,
    };

    fn shard(id: usize, seed: u64, n: usize) -> ClientShard {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = || {
            let y = Image::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0)).unwrap();
            let x = y.map(|v| 0.8 * v).unwrap();
            (x, y)
        };
        let train_pairs = (0..n).map(|_| pair()).collect();
        let test_pairs = (0..2).map(|_| pair()).collect();
        ClientShard {
            id,
            train_pairs,
            test_pairs,
            mask: SamplingMask::full(16),
            noise_std: 0.0,
            contrast: (1.0, 0.0),
            seed,
        }
    }

    fn settings(mode: TrainMode, lr: f64) -> LocalSettings {
        LocalSettings {
            mode,
            epochs: 2,
            lr,
            batch_size: 2,
            projection_target: ProjectionTarget::Gradient,
            momentum: 0.0,
        }
    }

    fn bases_for(prompts: &PromptSet, gamma: f64) -> Vec<NullSpaceBasis> {
        prompts
            .layers
            .iter()
            .enumerate()
            .map(|(i, p)| null_space_of(p, gamma, i).unwrap())
            .collect()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let b = Backbone::init(DIMS, Activation::Tanh, 1).unwrap();
        let start = PromptSet::random(&DIMS, 0.3, 2);
        let c = shard(0, 3, 5);
        for mode in TrainMode::ALL {
            let out = local_update(
                &c,
                &start,
                &b,
                None,
                &settings(mode, 0.0),
                4,
                1,
                &NoObserver,
            )
            .unwrap();
            assert_eq!(out.prompts, start);
            assert_eq!(out.steps, 6);
        }
    }

    #[test]
    fn zero_gamma_freezes_prompts() {
        let b = Backbone::init(DIMS, Activation::Tanh, 1).unwrap();
        let start = PromptSet::random(&DIMS, 0.3, 2);
        let bases = bases_for(&start, 0.0);
        let c = shard(0, 3, 5);
        let out = local_update(
            &c,
            &start,
            &b,
            Some(&bases),
            &settings(TrainMode::Fedpr, 0.5),
            4,
            2,
            &NoObserver,
        )
        .unwrap();
        assert_eq!(out.prompts, start);
    }

    #[test]
    fn full_gamma_matches_prompt_only() {
        let b = Backbone::init(DIMS, Activation::Tanh, 1).unwrap();
        let start = PromptSet::random(&DIMS, 0.3, 2);
        let c = shard(0, 3, 5);
        let bases = bases_for(&start, 100.0);
        let fedpr = local_update(
            &c,
            &start,
            &b,
            Some(&bases),
            &settings(TrainMode::Fedpr, 0.2),
            9,
            2,
            &NoObserver,
        )
        .unwrap();
        let plain = local_update(
            &c,
            &start,
            &b,
            None,
            &settings(TrainMode::PromptOnly, 0.2),
            9,
            2,
            &NoObserver,
        )
        .unwrap();
        for (a, p) in fedpr.prompts.layers.iter().zip(&plain.prompts.layers) {
            assert!((a - p).norm() < 1e-12);
        }
        assert_ne!(plain.prompts, start);
    }

    #[test]
    fn prompt_target_shrinks_within_null_space() {
        let b = Backbone::init(DIMS, Activation::Tanh, 1).unwrap();
        let start = PromptSet::random(&DIMS, 0.3, 2);
        let bases = bases_for(&start, 50.0);
        let mut s = settings(TrainMode::Fedpr, 0.1);
        s.projection_target = ProjectionTarget::Prompt;
        let out = local_update(
            &shard(0, 3, 4),
            &start,
            &b,
            Some(&bases),
            &s,
            1,
            2,
            &NoObserver,
        )
        .unwrap();
        // the loss never enters the literal rule: P ← P(I − ηΠ) per step
        for (i, layer) in out.prompts.layers.iter().enumerate() {
            let mut expected = start.layers[i].clone();
            for _ in 0..out.steps {
                expected = &expected - &expected * &bases[i].projector * 0.1;
            }
            assert!((layer - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn fedavg_moves_the_backbone_copy_only() {
        let b = Backbone::init(DIMS, Activation::Tanh, 1).unwrap();
        let before = b.clone();
        let out = local_update(
            &shard(0, 3, 4),
            &PromptSet::zeros(&DIMS),
            &b,
            None,
            &settings(TrainMode::FedavgFft, 0.05),
            1,
            1,
            &NoObserver,
        )
        .unwrap();
        assert_eq!(b, before);
        assert_ne!(out.backbone.unwrap(), before);

        let mut s = settings(TrainMode::FedavgFft, 0.05);
        s.momentum = 0.9;
        let m = local_update(
            &shard(0, 3, 4),
            &PromptSet::zeros(&DIMS),
            &b,
            None,
            &s,
            1,
            1,
            &NoObserver,
        )
        .unwrap();
        assert!(m.prompts.is_finite());
    }

    #[test]
    fn aggregation_examples() {
        let one = |v: f64| PromptSet {
            layers: vec![DMatrix::from_element(1, 1, v)],
        };
        let (a, b) = (one(0.0), one(4.0));
        let out = aggregate(&[(&a, 1), (&b, 3)]).unwrap();
        assert_eq!(out.layers[0][(0, 0)], 3.0);

        let p = PromptSet::random(&DIMS, 1.0, 5);
        assert_eq!(aggregate(&[(&p, 7)]).unwrap(), p);
        assert_eq!(aggregate(&[(&p, 2), (&p, 5), (&p, 1)]).unwrap(), p);

        let q = PromptSet::random(&DIMS, 1.0, 6);
        let mean = aggregate(&[(&p, 4), (&q, 4)]).unwrap();
        for (m, (x, y)) in mean.layers.iter().zip(p.layers.iter().zip(&q.layers)) {
            assert!((m - (x + y) * 0.5).norm() < 1e-15);
        }

        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(&p, 0), (&q, 0)]).is_err());
        assert!(aggregate(&[(&p, 1), (&a, 1)]).is_err());
    }

    #[test]
    fn seeds_are_distinct_per_round_and_client() {
        let mut seen = std::collections::HashSet::new();
        for r in 0..20 {
            for c in 0..20 {
                assert!(seen.insert(derive_seed(7, r, c)));
            }
        }
    }

    #[test]
    fn single_client_zero_lr_round_keeps_prompts() {
        let b = Backbone::init(DIMS, Activation::Tanh, 1).unwrap();
        let clients = vec![shard(0, 3, 4)];
        let config = FederationConfig {
            rounds: 2,
            local_epochs: 1,
            lr: 0.0,
            batch_size: 2,
            ..FederationConfig::default()
        };
        let state = run_federation(&clients, None, b, &config, &NoObserver).unwrap();
        assert_eq!(state.global_prompts, PromptSet::zeros(&DIMS));
        assert_eq!(state.history.len(), 2);
        // zero covariance: R = 0 for γ < 100
        assert!(state.history[1].residual_ratios.iter().all(|&r| r == 0.0));
        assert_eq!(
            state.ledger.total_scalars,
            2 * 2 * DIMS.prompt_scalars() as u64
        );
    }

    #[test]
    fn identical_clients_aggregate_to_either_update() {
        let b = Backbone::init(DIMS, Activation::Tanh, 1).unwrap();
        let single = vec![shard(0, 3, 4)];
        let twins = vec![shard(0, 3, 4), shard(0, 3, 4)];
        let config = FederationConfig {
            rounds: 2,
            local_epochs: 1,
            lr: 0.1,
            batch_size: 2,
            ..FederationConfig::default()
        };
        let a = run_federation(&single, None, b.clone(), &config, &NoObserver).unwrap();
        let t = run_federation(&twins, None, b, &config, &NoObserver).unwrap();
        assert_eq!(a.global_prompts, t.global_prompts);
    }
}
