use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lomt_cli::config::parse_set;
use lomt_cli::{error_record, exit_code, load, run, write_error_record, Step};

/// Layer-optimized multi-task learning experiments.
#[derive(Parser)]
#[command(name = "lomt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the synthetic dataset as PNGs plus a manifest.
    GenData(Common),
    /// Train single-task models (dense or sparse, by lambda).
    TrainStl(Common),
    /// Sparsity pattern, last active layer and compression per seed.
    Analyze(Common),
    /// Pick per-task taps from phase-1 patterns.
    PlanLomt(Common),
    /// Train a dense multi-task or layer-optimized model.
    TrainMtl(Common),
    /// Phase-1 runs over a grid of lambdas.
    Sweep(Common),
    /// Tables and grids across finished runs.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Training seed; repeat for several runs.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Override a config entry, e.g. `train.optimizer.lambda=0.0005`.
    #[arg(long = "set", value_parser = parse_set)]
    sets: Vec<(String, String)>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (step, args) = match cli.command {
        Command::GenData(a) => (Step::GenData, a),
        Command::TrainStl(a) => (Step::TrainStl, a),
        Command::Analyze(a) => (Step::Analyze, a),
        Command::PlanLomt(a) => (Step::PlanLomt, a),
        Command::TrainMtl(a) => (Step::TrainMtl, a),
        Command::Sweep(a) => (Step::Sweep, a),
        Command::Report(a) => (Step::Report, a),
    };

    let loaded = match load(&args.config, &args.sets, &args.seeds) {
        Ok(l) => l,
        Err(e) => return fail(&e, None),
    };
    match run(step, &loaded) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e, Some(loaded.run_dir())),
    }
}

fn fail(err: &anyhow::Error, run_dir: Option<PathBuf>) -> ExitCode {
    eprintln!("{}", error_record(err));
    if let Some(dir) = run_dir {
        write_error_record(&dir, err);
    }
    ExitCode::from(exit_code(err) as u8)
}
