//! `cascade`: train, sample, evaluate and compare self-cascade arms.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cascade_core::config::Arm;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cascade", version, about = "Self-cascade diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Set one config field, e.g. `train.steps=500`; repeatable, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Arm to run (base, ours_tf, ours_t, direct, full_ft, lowrank<r>); defaults to the config's arm.
    #[arg(long)]
    pub arm: Option<Arm>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an arm: pretraining (base), upsampler tuning (ours_t), full or low-rank fine-tuning.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Starting checkpoint; required for every arm except `base`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Training seed (pretrain.seed for `base`, train.seed otherwise).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate images; writes one PNG per sample and stage plus provenance.json.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Base seed of the per-sample noise streams (default: eval.sample_seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Generate eval.n_samples images and compute every proxy metric.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples (default: eval.n_samples).
        #[arg(long)]
        n: Option<usize>,
        /// Sample seed (default: eval.sample_seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Evaluate every arm of an experiment descriptor and print the comparison table.
    Compare {
        /// JSON descriptor: {"config": ..., "overrides": [...], "arms": [{"arm": ..., "checkpoint": ...}]}.
        descriptor: PathBuf,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
    },
    /// Print the cascade plan and parameter budget of a configuration.
    Plan {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the invariant suite: gradient checks, schedule checks, zero-init equivalence.
    Check {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("CASCADE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow::anyhow!("CASCADE_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
