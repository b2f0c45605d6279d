use clap::{Parser, Subcommand};
use pvudf_cli::commands::{eval, prepare, reconstruct, selftest, train};
use pvudf_cli::config::{self, EvalConfig, PrepareConfig, ReconstructConfig, TrainRunConfig};
use pvudf_cli::{CliError, CliResult};
use std::path::PathBuf;
use std::process::ExitCode;

/// Unsigned distance field reconstruction of open surfaces from point clouds.
#[derive(Parser)]
#[command(name = "pvudf", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "PVUDF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize meshes and write samples, grids and query archives.
    Prepare { config: PathBuf },
    /// Train a model on a prepared dataset.
    Train { config: PathBuf },
    /// Extract a dense point cloud with a trained model or an analytic field.
    Reconstruct { config: PathBuf },
    /// Score reconstructions against ground truth into a CSV file.
    Eval { config: PathBuf },
    /// Run the analytic-oracle checks and write their outputs to a directory.
    Selftest {
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Prepare { config } => prepare::run(&config::load::<PrepareConfig>(&config)?),
        Command::Train { config } => train::run(&config::load::<TrainRunConfig>(&config)?).map(|_| ()),
        Command::Reconstruct { config } => reconstruct::run(&config::load::<ReconstructConfig>(&config)?).map(|_| ()),
        Command::Eval { config } => eval::run(&config::load::<EvalConfig>(&config)?).map(|_| ()),
        Command::Selftest { output, seed } => selftest::run(&output, seed).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
