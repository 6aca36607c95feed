use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mhmgt::experiments::{run_verb, RunOptions, Verb};

/// Metropolis-Hastings with Gaussian tangent proposals: experiment runner.
#[derive(Parser)]
#[command(name = "mhmgt", version)]
struct Cli {
    #[command(subcommand)]
    verb: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one chain on a built-in target and write its trace.
    Chain(Common),
    /// Compare MH-MGT with the tuned slice baseline on simulated logistic data.
    Benchmark(Common),
    /// Hierarchical logistic regression with both beta samplers.
    Hb(Common),
    /// Randomized certificate/witness campaign for linear-projection models.
    Theorem(Common),
    /// Mixing index and acceptance rate against the number of observations.
    MixingScan(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "mhmgt-out")]
    out: PathBuf,
    /// Smaller default sizes for a fast run.
    #[arg(long)]
    quick: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, c) = match cli.verb {
        Command::Chain(c) => (Verb::Chain, c),
        Command::Benchmark(c) => (Verb::Benchmark, c),
        Command::Hb(c) => (Verb::Hb, c),
        Command::Theorem(c) => (Verb::Theorem, c),
        Command::MixingScan(c) => (Verb::MixingScan, c),
    };
    let opts = RunOptions {
        config: c.config,
        seed: c.seed,
        out: c.out,
        quick: c.quick,
    };
    match run_verb(verb, &opts) {
        Ok(o) => {
            println!("{}", o.message);
            for f in &o.files {
                println!("wrote {}", f.display());
            }
            if o.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
