//! dgsc: loss-landscape degeneracy toolkit.
//!
//! Trains the in-context regression transformer, estimates local learning
//! coefficients with localized SGLD, cross-checks them against the
//! volume-scaling oracle on analytic potentials, detects developmental
//! stages in LLC curves, and computes the behavioral/structural metric
//! suite.

mod cmd_analysis;
mod cmd_llc;
mod cmd_metrics;
mod cmd_train;
mod cmd_volume;
mod util;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dgsc", version, about = "loss-landscape degeneracy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the regression transformer and write checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default $DGSC_RUN_DIR/train or ./runs/train).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Estimate the LLC at one point (a potential's minimum or a trained
    /// checkpoint).
    EstimateLlc {
        /// Analytic potential name (l1..l7 or quadN).
        #[arg(long, conflicts_with = "checkpoint")]
        potential: Option<String>,
        /// Checkpoint file of a trained model (requires --config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        nbeta: Option<f64>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Estimate the LLC at every checkpoint of a training run.
    LlcCurve {
        #[arg(long)]
        config: PathBuf,
        /// Run directory containing checkpoints/.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the SGLD loss mode (subsequence|likelihood).
        #[arg(long)]
        loss_mode: Option<String>,
    },
    /// Grid sweep over the (epsilon, beta~, gamma~) reparametrization.
    Sweep {
        #[arg(long, conflicts_with = "checkpoint")]
        potential: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated grids; defaults target the potentials.
        #[arg(long, value_parser = util::parse_f64_list)]
        epsilons: Option<Vec<f64>>,
        #[arg(long, value_parser = util::parse_f64_list)]
        beta_tildes: Option<Vec<f64>>,
        #[arg(long, value_parser = util::parse_f64_list)]
        gamma_tildes: Option<Vec<f64>>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detect stage boundaries in an LLC-curve CSV.
    DetectStages {
        /// llc_curve.csv produced by llc-curve (or compatible).
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        length_scale: Option<f64>,
        /// Absolute tolerance on |d lambda / d log t| for plateaus;
        /// default is relative (5% of the max).
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Hutchinson trace and dominant Hessian eigenvalue at checkpoints.
    HessianStats {
        #[arg(long)]
        config: PathBuf,
        /// One checkpoint file, or --run for all checkpoints.
        #[arg(long, conflicts_with = "run")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        power_iters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Behavioral and structural metric suite over a run's checkpoints.
    Metrics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo volume-scaling estimate of a potential's LLC.
    VolumeOracle {
        #[arg(long)]
        potential: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 1e-5)]
        eps_min: f64,
        #[arg(long, default_value_t = 1e-1)]
        eps_max: f64,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 2_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Golden suite over the analytic potentials: volume oracle and SGLD
    /// estimates against the known LLCs.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run the slower potentials (l4..l6).
        #[arg(long)]
        full: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, resume } => cmd_train::run(config, out, resume),
        Command::EstimateLlc {
            potential,
            checkpoint,
            config,
            out,
            seed,
            epsilon,
            gamma,
            nbeta,
            chains,
            steps,
            burn_in,
            batch_size,
        } => cmd_llc::estimate(cmd_llc::EstimateArgs {
            potential,
            checkpoint,
            config,
            out,
            seed,
            epsilon,
            gamma,
            nbeta,
            chains,
            steps,
            burn_in,
            batch_size,
        }),
        Command::LlcCurve {
            config,
            run,
            out,
            loss_mode,
        } => cmd_llc::curve(config, run, out, loss_mode),
        Command::Sweep {
            potential,
            checkpoint,
            config,
            out,
            epsilons,
            beta_tildes,
            gamma_tildes,
            max_steps,
            seed,
        } => cmd_llc::sweep(cmd_llc::SweepArgs {
            potential,
            checkpoint,
            config,
            out,
            epsilons,
            beta_tildes,
            gamma_tildes,
            max_steps,
            seed,
        }),
        Command::DetectStages {
            curve,
            config,
            out,
            length_scale,
            tolerance,
        } => cmd_analysis::detect_stages(curve, config, out, length_scale, tolerance),
        Command::HessianStats {
            config,
            checkpoint,
            run,
            out,
            probes,
            power_iters,
            batch,
        } => cmd_analysis::hessian(config, checkpoint, run, out, probes, power_iters, batch),
        Command::Metrics { config, run, out } => cmd_metrics::run(config, run, out),
        Command::VolumeOracle {
            potential,
            out,
            radius,
            eps_min,
            eps_max,
            grid,
            samples,
            seed,
        } => cmd_volume::oracle(potential, out, radius, eps_min, eps_max, grid, samples, seed),
        Command::Selftest { out, full } => cmd_volume::selftest(out, full),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(util::exit_code(&e));
        }
    }
}
