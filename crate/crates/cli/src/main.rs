//! Batch analyses of matched observational studies over an exposure
//! hierarchy: build matched designs, test outcomes in gatekept order, model
//! attrition, and certify error rates by simulation.

mod commands;
mod config;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "treematch",
    about = "Matched observational studies over a hierarchy of exposure definitions",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    outdir: PathBuf,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores). Outputs do not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Global alpha override for the testing tree.
    #[arg(long)]
    alpha: Option<f64>,
    /// Propensity caliper width override (logit SD units).
    #[arg(long)]
    caliper: Option<f64>,
    /// Largest matched-set size tried during escalation.
    #[arg(long)]
    max_k: Option<usize>,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Cohort data (delimiter-separated text with a header row).
    #[arg(long)]
    input: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build matched designs and balance reports for every exposure node.
    Match {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Run gatekept hierarchy tests for the configured outcomes.
    Test {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Model outcome availability per exposure.
    Attrition {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Monte Carlo FWER / power validation on synthetic cohorts.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Replication count override.
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Re-render machine-readable outputs as tables.
    Report {
        /// Output directory of a previous run.
        #[arg(long)]
        outdir: PathBuf,
    },
}

fn configure_workers(workers: usize) {
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
}

fn overrides_of(common: &CommonArgs) -> config::Overrides {
    config::Overrides {
        seed: common.seed,
        alpha: common.alpha,
        caliper: common.caliper,
        max_k: common.max_k,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Match { common, input } => {
            configure_workers(common.workers);
            config::load(common.config.as_deref(), &overrides_of(common))
                .and_then(|cfg| commands::cmd_match(&cfg, &input.input, &common.outdir))
        }
        Command::Test { common, input } => {
            configure_workers(common.workers);
            config::load(common.config.as_deref(), &overrides_of(common))
                .and_then(|cfg| commands::cmd_test(&cfg, &input.input, &common.outdir))
        }
        Command::Attrition { common, input } => {
            configure_workers(common.workers);
            config::load(common.config.as_deref(), &overrides_of(common))
                .and_then(|cfg| commands::cmd_attrition(&cfg, &input.input, &common.outdir))
        }
        Command::Simulate {
            common,
            replications,
        } => {
            configure_workers(common.workers);
            config::load(common.config.as_deref(), &overrides_of(common))
                .and_then(|cfg| commands::cmd_simulate(&cfg, &common.outdir, *replications))
        }
        Command::Report { outdir } => commands::cmd_report(outdir),
    };
    if let Err(error) = result {
        eprintln!("error: {error:#}");
        std::process::exit(1);
    }
}
