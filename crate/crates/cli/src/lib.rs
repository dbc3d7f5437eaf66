//! Experiment runner: synthetic data generation, training, evaluation,
//! ablation studies and figures from one TOML config.

pub mod commands;
pub mod config;
pub mod data;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, CliResult, Study};
use config::{ExperimentConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "physode", version, about = "Advection neural ODE forecasting experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random component; overrides PHYSODE_SEED and the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Region preset for scoring.
    #[arg(long, global = true)]
    pub region: Option<String>,
    /// Training lead for synth/train; the single reported lead for eval.
    #[arg(long, global = true)]
    pub lead: Option<usize>,
    /// Dotted-path override such as `optim.lr=1e-3`; repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/val/test datasets.
    Synth(Common),
    /// Train a model bundle.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and baselines on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation study.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        study: Study,
    },
    /// Render figures for a run directory.
    Plot(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeadUse {
    Train,
    Report,
}

/// Loads the config, applies overrides and flags, and validates it.
fn resolve(common: &Common, lead_use: LeadUse) -> CliResult<ExperimentConfig> {
    let mut cfg = config::load(common.config.as_deref(), &common.overrides)?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = config::resolve_seed(cfg.seed, common.seed, env.as_deref())?;
    cfg.apply_seed(seed);
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(r) = &common.region {
        cfg.eval.region = Some(r.clone());
    }
    if let Some(n) = common.lead {
        match lead_use {
            LeadUse::Train => cfg.set_lead(n),
            LeadUse::Report => cfg.eval.leads = Some(vec![n]),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = resolve(&common, LeadUse::Train)?;
            commands::synth(&cfg)?;
        }
        Command::Train { common, resume } => {
            let cfg = resolve(&common, LeadUse::Train)?;
            let report = commands::train_cmd(&cfg, resume)?;
            println!(
                "trained {} steps; loss {:?} -> {:?}; best validation {:?}",
                report.steps,
                report.initial_loss(),
                report.final_loss(),
                report.best_validation
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common, LeadUse::Report)?;
            for r in commands::eval_cmd(&cfg, checkpoint.as_deref())? {
                for lead in r.leads() {
                    println!("{} lead {lead}h: mean rmse {:.6}", r.model, r.mean_rmse(lead).unwrap_or(f64::NAN));
                }
            }
        }
        Command::Ablate { common, study } => {
            let cfg = resolve(&common, LeadUse::Train)?;
            for row in commands::ablate_cmd(&cfg, study)? {
                println!("{}: {}", row.label, row.value);
            }
        }
        Command::Plot(common) => {
            let cfg = resolve(&common, LeadUse::Train)?;
            for p in commands::plot_cmd(&cfg.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every op; training allocates and frees the same large sizes
/// thousands of times per step.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        const LIMIT: libc::c_int = 1 << 30;
        libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT);
        libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT);
    }
}

/// Exit status for a finished command.
pub fn exit_code(result: &Result<(), CliError>) -> i32 {
    match result {
        Ok(()) => commands::EXIT_OK,
        Err(e) => e.exit_code(),
    }
}
