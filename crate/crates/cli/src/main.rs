//! `fednull` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fednull::harness::{
    experiment::{
        initial_backbone, mean_psnr_by_round, psnr_chart, PLOT_FILE, ROUNDS_FILE, SUMMARY_FILE,
    },
    gamma_sweep, rounds_sweep, run_experiment, synth_clients,
};
use fednull::{evaluate, io, ClientShard, Error, ExperimentConfig, PromptSet, Result, TrainMode};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "fednull",
    version,
    about = "Federated prompt learning with null-space projection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic client shards as FNIM images plus a manifest.
    SynthData(Common),
    /// Build the round-0 backbone and write it as a checkpoint.
    Pretrain(Common),
    /// Run one federation and write its artifacts.
    Train(Common),
    /// Score a prompt checkpoint on every client and the held-out shard.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Prompt checkpoint; zero prompts when omitted.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Backbone checkpoint; the config's round-0 backbone when omitted.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// One fedpr run per gamma on shared data.
    SweepGamma {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,20,40,60,80,100")]
        gammas: Vec<f64>,
    },
    /// Metrics after each of several round counts.
    SweepRounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        rounds: Vec<usize>,
    },
    /// Summarize a finished run directory.
    Report {
        /// Run directory holding rounds.csv and summary.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, initialization and federation seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    /// Null-space share in percent.
    #[arg(long)]
    gamma: Option<f64>,
    /// Output directory; the config's `output_dir` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write SVG charts.
    #[arg(long)]
    plot: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(seed) = self.seed {
            c.data.seed = seed;
            c.model.init_seed = seed;
            c.federation.seed = seed;
        }
        if let Some(mode) = &self.mode {
            c.federation.mode = mode.parse::<TrainMode>()?;
        }
        if let Some(gamma) = self.gamma {
            c.federation.gamma_percent = gamma;
        }
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable report")
    );
}

fn write_shard(dir: &Path, shard: &ClientShard) -> Result<serde_json::Value> {
    let sets = [("train", &shard.train_pairs), ("test", &shard.test_pairs)];
    for (split, pairs) in sets {
        for (i, (x, y)) in pairs.iter().enumerate() {
            io::write_image(&dir.join(format!("{split}_{i:03}_x.fnim")), x)?;
            io::write_image(&dir.join(format!("{split}_{i:03}_y.fnim")), y)?;
        }
    }
    let mask: String = shard
        .mask
        .columns_kept
        .iter()
        .map(|&k| if k { '1' } else { '0' })
        .collect();
    Ok(json!({
        "id": shard.id,
        "dir": dir.file_name().map(|n| n.to_string_lossy().into_owned()),
        "train": shard.train_pairs.len(),
        "test": shard.test_pairs.len(),
        "acceleration": shard.mask.acceleration,
        "mask": mask,
        "noise_std": shard.noise_std,
        "gain": shard.contrast.0,
        "offset": shard.contrast.1,
    }))
}

fn synth_data(common: &Common) -> Result<()> {
    let c = common.config()?;
    let (clients, held_out) = synth_clients(&c)?;
    let mut entries = Vec::with_capacity(clients.len() + 1);
    for shard in &clients {
        entries.push(write_shard(
            &c.output_dir.join(format!("client_{}", shard.id)),
            shard,
        )?);
    }
    entries.push(write_shard(&c.output_dir.join("held_out"), &held_out)?);
    let count = entries.len();
    let manifest = json!({ "config_hash": c.hash()?, "shards": entries });
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    io::write_bytes(&c.output_dir.join("manifest.json"), text.as_bytes())?;
    println!("wrote {count} shards to {}", c.output_dir.display());
    Ok(())
}

fn pretrain(common: &Common) -> Result<()> {
    let c = common.config()?;
    let backbone = initial_backbone(&c)?;
    let path = c.output_dir.join("backbone.fnpm");
    io::write_backbone(&path, &backbone)?;
    let (clients, held_out) = synth_clients(&c)?;
    let eval = evaluate(
        &PromptSet::zeros(&c.model.dims()),
        &backbone,
        &clients,
        Some(&held_out),
    )?;
    print_json(&json!({
        "checkpoint": path,
        "in_federation": eval.mean_in_federation(),
        "out_of_federation": eval.out_of_federation,
    }));
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let c = common.config()?;
    let art = run_experiment(&c, &c.output_dir, common.plot)?;
    print_json(&art.summary);
    Ok(())
}

fn evaluate_checkpoint(
    common: &Common,
    prompts: Option<&Path>,
    backbone: Option<&Path>,
) -> Result<()> {
    let c = common.config()?;
    let backbone = match backbone {
        Some(path) => io::read_backbone(path)?,
        None => initial_backbone(&c)?,
    };
    let prompts = match prompts {
        Some(path) => io::read_prompts(path)?,
        None => PromptSet::zeros(&backbone.dims),
    };
    let (clients, held_out) = synth_clients(&c)?;
    let eval = evaluate(&prompts, &backbone, &clients, Some(&held_out))?;
    print_json(&json!({
        "mean_in_federation": eval.mean_in_federation(),
        "in_federation": eval.in_federation,
        "out_of_federation": eval.out_of_federation,
    }));
    Ok(())
}

fn sweep_gamma(common: &Common, gammas: &[f64]) -> Result<()> {
    let c = common.config()?;
    let rows = gamma_sweep(&c, gammas, Some(&c.output_dir), common.plot)?;
    println!("gamma,psnr,ssim,nmse,mean_r");
    for r in rows {
        println!(
            "{},{:.4},{:.4},{:.6},{:.6}",
            r.gamma_percent, r.psnr, r.ssim, r.nmse, r.mean_residual_ratio
        );
    }
    Ok(())
}

fn sweep_rounds(common: &Common, rounds: &[usize]) -> Result<()> {
    let c = common.config()?;
    let rows = rounds_sweep(&c, rounds, Some(&c.output_dir), common.plot)?;
    println!("rounds,psnr,ssim,nmse");
    for r in rows {
        println!("{},{:.4},{:.4},{:.6}", r.rounds, r.psnr, r.ssim, r.nmse);
    }
    Ok(())
}

fn report(run: &Path, plot: bool) -> Result<()> {
    let csv_bytes = io::read_bytes(&run.join(ROUNDS_FILE))?;
    let csv_text = String::from_utf8(csv_bytes)
        .map_err(|_| Error::InvalidInput(format!("{} is not utf-8", ROUNDS_FILE)))?;
    let summary: serde_json::Value =
        serde_json::from_slice(&io::read_bytes(&run.join(SUMMARY_FILE))?)
            .map_err(|e| Error::InvalidInput(format!("{SUMMARY_FILE}: {e}")))?;
    let mode = summary["mode"].as_str().unwrap_or("run");
    println!("mode {mode}");
    println!("round,mean_psnr");
    for (round, psnr) in mean_psnr_by_round(&csv_text)? {
        println!("{round},{psnr:.4}");
    }
    println!("forgetting_gap {}", summary["forgetting_gap"]);
    if plot {
        let path = run.join(PLOT_FILE);
        io::write_bytes(&path, psnr_chart(&csv_text, mode)?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(common) => synth_data(&common),
        Command::Pretrain(common) => pretrain(&common),
        Command::Train(common) => train(&common),
        Command::Evaluate {
            common,
            prompts,
            backbone,
        } => evaluate_checkpoint(&common, prompts.as_deref(), backbone.as_deref()),
        Command::SweepGamma { common, gammas } => sweep_gamma(&common, &gammas),
        Command::SweepRounds { common, rounds } => sweep_rounds(&common, &rounds),
        Command::Report { run, plot } => report(&run, plot),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::NumericalFailure(_) => 3,
        Error::Io { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fednull: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
