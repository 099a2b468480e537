//! Run orchestration and on-disk artifacts.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml                  snapshot the run was started from
//! rounds.csv                   one row per (round, client)
//! summary.json                 final metrics, forgetting gap, config hash
//! checkpoints/backbone.fnpm    backbone at round 0
//! checkpoints/round_NNN.fnpm   global prompts after round NNN
//! checkpoints/backbone_final.fnpm   fedavg_fft only
//! psnr.svg                     only when plotting is requested
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    run_federation, ClientShard, Evaluation, FederationState, NoObserver, StepObserver, TrainMode,
};
use crate::io;
use crate::metrics::{forgetting_gap, CommLedger, MetricReport};
use crate::mri::Image;
use crate::promptmodel::{pretrain_backbone, Backbone};

use super::config::ExperimentConfig;
use super::svg::{line_chart, Series};
use super::synth::{source_set, synth_clients};

pub const CONFIG_FILE: &str = "config.toml";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_FILE: &str = "psnr.svg";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Data and starting backbone shared by every run of one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub clients: Vec<ClientShard>,
    pub held_out: ClientShard,
    pub backbone: Backbone,
}

/// Synthesizes the clients and builds the round-0 backbone, pretrained on
/// the source set when the config asks for it.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (clients, held_out) = synth_clients(config)?;
    Ok(Prepared {
        clients,
        held_out,
        backbone: initial_backbone(config)?,
    })
}

pub fn initial_backbone(config: &ExperimentConfig) -> Result<Backbone> {
    let m = &config.model;
    if m.pretrain {
        let source: Vec<(Image, Image)> = source_set(config)?;
        pretrain_backbone(
            m.dims(),
            m.activation,
            &source,
            m.pretrain_epochs,
            m.pretrain_lr,
            m.init_seed,
        )
    } else {
        Backbone::init(m.dims(), m.activation, m.init_seed)
    }
}

/// Federated training on prepared data.
pub fn train(
    config: &ExperimentConfig,
    prepared: &Prepared,
    observer: &dyn StepObserver,
) -> Result<FederationState> {
    run_federation(
        &prepared.clients,
        Some(&prepared.held_out),
        prepared.backbone.clone(),
        &config.federation_config(),
        observer,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub mode: TrainMode,
    pub gamma_percent: f64,
    pub rounds: usize,
    pub clients: usize,
    pub initial_in_federation: MetricReport,
    pub initial_out_of_federation: Option<MetricReport>,
    pub final_in_federation: MetricReport,
    pub final_out_of_federation: Option<MetricReport>,
    pub final_per_client: Vec<MetricReport>,
    /// Mean over clients of final global loss minus the best earlier one.
    pub forgetting_gap: f64,
    pub final_residual_ratios: Vec<f64>,
    pub ledger: CommLedger,
}

impl Summary {
    pub fn from_state(config: &ExperimentConfig, state: &FederationState) -> Result<Self> {
        let last = state
            .history
            .last()
            .ok_or_else(|| Error::invalid("no completed round to summarize"))?;
        let initial: &Evaluation = state
            .initial_evaluation
            .as_ref()
            .ok_or_else(|| Error::invalid("state carries no initial evaluation"))?;
        let per_client: Vec<MetricReport> = last.clients.iter().map(|c| c.in_federation).collect();
        let mut losses = vec![initial.global_losses.clone()];
        losses.extend(
            state
                .history
                .iter()
                .map(|r| r.clients.iter().map(|c| c.global_loss).collect()),
        );
        Ok(Self {
            config_hash: config.hash()?,
            mode: config.federation.mode,
            gamma_percent: config.federation.gamma_percent,
            rounds: state.round,
            clients: per_client.len(),
            initial_in_federation: initial.mean_in_federation(),
            initial_out_of_federation: initial.out_of_federation,
            final_in_federation: MetricReport::mean(&per_client).expect("clients present"),
            final_out_of_federation: last.out_of_federation,
            final_per_client: per_client,
            forgetting_gap: forgetting_gap(&losses)?,
            final_residual_ratios: last.residual_ratios.clone(),
            ledger: state.ledger,
        })
    }
}

/// Column names of the per-round CSV for `layers` prompt layers.
pub fn csv_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "round",
        "client_id",
        "train_loss",
        "psnr",
        "ssim",
        "nmse",
        "scalars_up",
        "scalars_down",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..layers).map(|i| format!("r_layer_{i}")));
    h
}

fn csv_error(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Per-round CSV text; `scalars_*` are per client.
pub fn rounds_csv(state: &FederationState) -> Result<String> {
    let layers = state.global_prompts.layers.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header(layers)).map_err(csv_error)?;
    for r in &state.history {
        for c in &r.clients {
            let mut row = vec![
                r.round.to_string(),
                c.client_id.to_string(),
                c.train_loss.to_string(),
                c.in_federation.psnr.to_string(),
                c.in_federation.ssim.to_string(),
                c.in_federation.nmse.to_string(),
                r.scalars_up.to_string(),
                r.scalars_down.to_string(),
            ];
            row.extend(r.residual_ratios.iter().map(|v| v.to_string()));
            w.write_record(row).map_err(csv_error)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Mean in-federation PSNR per round, read back from a rounds CSV.
pub fn mean_psnr_by_round(csv_text: &str) -> Result<Vec<(usize, f64)>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("csv lacks column `{name}`")))
    };
    let (round_col, psnr_col) = (col("round")?, col("psnr")?);
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        let parse_err = |what: &str| Error::invalid(format!("bad {what} value in csv"));
        let round: usize = rec[round_col].parse().map_err(|_| parse_err("round"))?;
        let psnr: f64 = rec[psnr_col].parse().map_err(|_| parse_err("psnr"))?;
        match out.last_mut() {
            Some(last) if last.0 == round => {
                last.1 += psnr;
                last.2 += 1;
            }
            _ => out.push((round, psnr, 1)),
        }
    }
    Ok(out.into_iter().map(|(r, s, n)| (r, s / n as f64)).collect())
}

/// PSNR-over-rounds chart of a rounds CSV.
pub fn psnr_chart(csv_text: &str, label: &str) -> Result<String> {
    let points = mean_psnr_by_round(csv_text)?
        .into_iter()
        .map(|(r, p)| (r as f64, p))
        .collect();
    Ok(line_chart(
        "In-federation PSNR",
        "round",
        "PSNR (dB)",
        &[Series {
            name: label,
            points,
        }],
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub dir: PathBuf,
    pub config_path: PathBuf,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub plot_path: Option<PathBuf>,
    pub summary: Summary,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_bytes(path, text.as_bytes())
}

/// Writes snapshot, CSV, summary, checkpoints and, if `plot`, the SVG.
pub fn emit_report(
    config: &ExperimentConfig,
    initial_backbone: &Backbone,
    state: &FederationState,
    dir: &Path,
    plot: bool,
) -> Result<RunArtifact> {
    let config_path = dir.join(CONFIG_FILE);
    write_text(&config_path, &config.to_toml()?)?;

    let csv_text = rounds_csv(state)?;
    let csv_path = dir.join(ROUNDS_FILE);
    write_text(&csv_path, &csv_text)?;

    let summary = Summary::from_state(config, state)?;
    let summary_path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::invalid(format!("summary: {e}")))?;
    write_text(&summary_path, &(json + "\n"))?;

    let ckpt = dir.join(CHECKPOINT_DIR);
    let mut checkpoints = vec![ckpt.join("backbone.fnpm")];
    io::write_backbone(&checkpoints[0], initial_backbone)?;
    for (i, prompts) in state.prompt_history.iter().enumerate() {
        let path = ckpt.join(format!("round_{:03}.fnpm", i + 1));
        io::write_prompts(&path, prompts)?;
        checkpoints.push(path);
    }
    if config.federation.mode == TrainMode::FedavgFft {
        let path = ckpt.join("backbone_final.fnpm");
        io::write_backbone(&path, &state.backbone)?;
        checkpoints.push(path);
    }

    let plot_path = if plot {
        let path = dir.join(PLOT_FILE);
        write_text(
            &path,
            &psnr_chart(&csv_text, config.federation.mode.as_str())?,
        )?;
        Some(path)
    } else {
        None
    };

    Ok(RunArtifact {
        dir: dir.to_path_buf(),
        config_path,
        csv_path,
        summary_path,
        checkpoints,
        plot_path,
        summary,
    })
}

/// Data synthesis, optional pretraining, federation and artifacts in `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path, plot: bool) -> Result<RunArtifact> {
    let prepared = prepare(config)?;
    let state = train(config, &prepared, &NoObserver)?;
    emit_report(config, &prepared.backbone, &state, dir, plot)
}

/// Final metrics of one γ in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma_percent: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    /// Residual ratio of the final global prompts, averaged over layers.
    pub mean_residual_ratio: f64,
    pub out_of_federation_psnr: Option<f64>,
}

/// One `fedpr` run per γ on shared data, seeds and backbone. When `dir` is
/// given each run lands in `dir/gamma_<γ>` next to `gamma_sweep.csv`.
pub fn gamma_sweep(
    config: &ExperimentConfig,
    gammas: &[f64],
    dir: Option<&Path>,
    plot: bool,
) -> Result<Vec<GammaRow>> {
    if let Some(g) = gammas.iter().find(|g| !(0.0..=100.0).contains(*g)) {
        return Err(Error::Config(format!("gamma {g} outside [0, 100]")));
    }
    let prepared = prepare(config)?;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let mut c = config.clone();
        c.federation.mode = TrainMode::Fedpr;
        c.federation.gamma_percent = gamma;
        let state = train(&c, &prepared, &NoObserver)?;
        let summary = match dir {
            Some(d) => {
                emit_report(
                    &c,
                    &prepared.backbone,
                    &state,
                    &d.join(format!("gamma_{gamma}")),
                    plot,
                )?
                .summary
            }
            None => Summary::from_state(&c, &state)?,
        };
        let r = &summary.final_residual_ratios;
        rows.push(GammaRow {
            gamma_percent: gamma,
            psnr: summary.final_in_federation.psnr,
            ssim: summary.final_in_federation.ssim,
            nmse: summary.final_in_federation.nmse,
            mean_residual_ratio: r.iter().sum::<f64>() / r.len() as f64,
            out_of_federation_psnr: summary.final_out_of_federation.map(|m| m.psnr),
        });
    }
    if let Some(d) = dir {
        let mut text = String::from("gamma,psnr,ssim,nmse,mean_r\n");
        for r in &rows {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.gamma_percent, r.psnr, r.ssim, r.nmse, r.mean_residual_ratio
            ));
        }
        write_text(&d.join("gamma_sweep.csv"), &text)?;
        if plot {
            let svg = line_chart(
                "Final PSNR versus gamma",
                "gamma (%)",
                "PSNR (dB)",
                &[Series {
                    name: "fedpr",
                    points: rows.iter().map(|r| (r.gamma_percent, r.psnr)).collect(),
                }],
            );
            write_text(&d.join("gamma_sweep.svg"), &svg)?;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundsRow {
    pub rounds: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub out_of_federation_psnr: Option<f64>,
}

/// Metrics after each requested round count. Runs are prefixes of one
/// another, so a single run of `max(rounds)` rounds covers the sweep.
pub fn rounds_sweep(
    config: &ExperimentConfig,
    rounds: &[usize],
    dir: Option<&Path>,
    plot: bool,
) -> Result<Vec<RoundsRow>> {
    let max = *rounds
        .iter()
        .max()
        .ok_or_else(|| Error::Config("no round counts given".into()))?;
    if rounds.contains(&0) {
        return Err(Error::Config("round counts must be positive".into()));
    }
    let mut c = config.clone();
    c.federation.rounds = max;
    let prepared = prepare(&c)?;
    let state = train(&c, &prepared, &NoObserver)?;
    let rows: Vec<RoundsRow> = rounds
        .iter()
        .map(|&z| {
            let rec = &state.history[z - 1];
            let m = MetricReport::mean(
                &rec.clients
                    .iter()
                    .map(|c| c.in_federation)
                    .collect::<Vec<_>>(),
            )
            .expect("clients present");
            RoundsRow {
                rounds: z,
                psnr: m.psnr,
                ssim: m.ssim,
                nmse: m.nmse,
                out_of_federation_psnr: rec.out_of_federation.map(|o| o.psnr),
            }
        })
        .collect();
    if let Some(d) = dir {
        emit_report(&c, &prepared.backbone, &state, d, plot)?;
        let mut text = String::from("rounds,psnr,ssim,nmse\n");
        for r in &rows {
            text.push_str(&format!("{},{},{},{}\n", r.rounds, r.psnr, r.ssim, r.nmse));
        }
        write_text(&d.join("rounds_sweep.csv"), &text)?;
    }
    Ok(rows)
}
