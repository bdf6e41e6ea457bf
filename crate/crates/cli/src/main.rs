//! `guardgen` — config-driven experiment runner.
//!
//! Exit codes: 0 success, 2 config error, 3 draw-budget exhaustion,
//! 4 guarantee-audit failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use guardgen::config::ExperimentConfig;
use guardgen::SequenceModel;
use guardgen::harness::Harness;

#[derive(Parser)]
#[command(name = "guardgen", version, about = "Guaranteed-generation laboratory over finite sequence models")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(short, long, global = true, default_value = "guardgen.toml")]
    config: PathBuf,

    /// Override the artifact output directory (beats GUARDGEN_OUT and the
    /// config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate the config, resolving models and constraints.
    ValidateConfig,
    /// Write the exact base and gold tables plus a summary.
    Enumerate,
    /// Train the configured methods (seed 0) and save models + curves.
    Train,
    /// Emit guaranteed samples with a sampler report and diversity block.
    Sample,
    /// Exact Theorem-2 quadruple for the configured proposal.
    ReportTheorem2,
    /// Learning curves for all methods across the paired seeds.
    LearningCurve,
    /// Distributional-distance vs inference-cost table.
    Tradeoff,
    /// Heuristic samplers vs trained proposal, exact divergences.
    Heuristics,
    /// QRS β-sweep and IMH n-sweep under the positional projection.
    SweepQrsImh,
    /// Validate the KL(g‖g') estimator against the exact value.
    Estimator,
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, guardgen::HarnessError> {
    let cfg = ExperimentConfig::from_file(&cli.config)
        .map_err(guardgen::HarnessError::Config)?;
    let harness = Harness::new(&cfg, cli.out.as_deref())?;
    match cli.command {
        Command::ValidateConfig => {
            let exp = harness.experiment();
            println!(
                "ok: scenario={} vocab={} l_max={} methods={:?}",
                exp.name,
                exp.base.vocab().len(),
                exp.base.l_max(),
                cfg.trainer.methods
            );
            Ok(vec![])
        }
        Command::Enumerate => harness.run_enumerate(),
        Command::Train => harness.run_train(),
        Command::Sample => harness.run_sample(),
        Command::ReportTheorem2 => harness.run_report_theorem2(),
        Command::LearningCurve => harness.run_learning_curve(),
        Command::Tradeoff => harness.run_tradeoff(),
        Command::Heuristics => harness.run_heuristics(),
        Command::SweepQrsImh => harness.run_sweep_qrs_imh(),
        Command::Estimator => harness.run_estimator(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
