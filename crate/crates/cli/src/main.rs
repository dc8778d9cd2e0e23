use dytx_cli::commands;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dytx", about = "Dynamic early-exit tracker pipeline", version)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (train/val/test across difficulty levels).
    GenData,
    /// Two-stage training; writes checkpoint.dytx and train_log.csv.
    Train {
        /// Dataset root produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Named preset: reuse:<mode>, distill:<mode>, or strategy:<name>.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Sweep exit thresholds on the validation split.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Same preset used at training time, if any.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Track a single sequence directory; writes per-frame CSV.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        /// adaptive | fixed:<k> | random:<p0,p1,...>
        #[arg(long, default_value = "adaptive")]
        policy: String,
        /// Adaptive thresholds, comma separated.
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Evaluate on the test split; writes metrics/exit/difficulty CSVs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "adaptive")]
        policy: String,
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Compute the Pareto front of a label,speed,precision CSV.
    Pareto {
        #[arg(long = "in", value_name = "CSV")]
        input: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = commands::load_config(&cli.config)?;
    let out = |c: &Cli| -> Result<PathBuf> {
        match &c.out {
            Some(p) => Ok(p.clone()),
            None => bail!("--out is required for this command"),
        }
    };
    match &cli.cmd {
        Cmd::GenData => commands::cmd_gen_data(&cfg, &out(&cli)?, cli.seed, cli.force),
        Cmd::Train { data, ablate } => {
            if let Some(a) = ablate {
                commands::apply_ablation(&mut cfg, a)?;
            }
            commands::cmd_train(&cfg, data, &out(&cli)?, cli.seed, cli.force)
        }
        Cmd::Calibrate { ckpt, data, ablate } => {
            if let Some(a) = ablate {
                commands::apply_ablation(&mut cfg, a)?;
            }
            commands::cmd_calibrate(&cfg, ckpt, data, &out(&cli)?, cli.seed, cli.force)
        }
        Cmd::Track {
            ckpt,
            seq,
            policy,
            tau,
            ablate,
        } => {
            if let Some(a) = ablate {
                commands::apply_ablation(&mut cfg, a)?;
            }
            commands::cmd_track(&cfg, ckpt, seq, &out(&cli)?, policy, tau, cli.seed, cli.force)
        }
        Cmd::Eval {
            ckpt,
            data,
            policy,
            tau,
            ablate,
        } => {
            if let Some(a) = ablate {
                commands::apply_ablation(&mut cfg, a)?;
            }
            commands::cmd_eval(
                &cfg,
                ckpt,
                data,
                &out(&cli)?,
                policy,
                tau,
                cli.seed,
                cli.jobs,
                cli.force,
            )
        }
        Cmd::Pareto { input } => commands::cmd_pareto(&cfg, input, &out(&cli)?, cli.seed, cli.force),
    }
}
