mod cmds;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmds::Failure;
use config::ExperimentConfig;

/// Desk-scale laboratory for sign-switching segmentation losses under
/// adversarial domain shift.
#[derive(Parser)]
#[command(name = "adaptlab", version, about)]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for artifacts; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Replace the training seed and the comparison seed panel.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Worker threads for the comparison battery.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the loss-curve charts and report zero crossings.
    PlotLoss,
    /// Verify analytic gradients against central differences.
    Gradcheck {
        /// Corrupt one gradient on purpose; the check must then fail.
        #[arg(long)]
        plant_fault: bool,
    },
    /// Generate the synthetic two-domain dataset and report label balance.
    GenData,
    /// Run one training schedule and write history, checkpoint, and chart.
    Train,
    /// Run the ablation battery across the seed panel and rank rows.
    Compare,
    /// Dump encoder features for both evaluation splits from a checkpoint.
    ExportFeatures {
        /// Model checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed_override {
        cfg.schedule.seed = seed;
        cfg.compare.seeds = vec![seed];
    }
    cfg.resolve()?;
    match cli.command {
        Command::PlotLoss => cmds::plot_loss(&cfg, &cli.out),
        Command::Gradcheck { plant_fault } => cmds::gradcheck(plant_fault),
        Command::GenData => cmds::gen_data(&cfg, &cli.out),
        Command::Train => cmds::train(&cfg, &cli.out),
        Command::Compare => cmds::compare(&cfg, &cli.out, cli.parallel),
        Command::ExportFeatures { checkpoint } => {
            cmds::export_features(&cfg, &checkpoint, &cli.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
