//! `invpca`: principal components of indirectly observed surface functions.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure. Errors are
//! reported on stderr as one JSON object.

mod commands;
mod config;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use invpca::Error;
use serde_json::json;

use config::{RunArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "invpca", version, about = "Principal components of indirectly observed functions on surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Functional PCA of observations y_l = K_l x_l + noise.
    FitFunc(RunArgs),
    /// Common components of a family of sensor covariances.
    FitCov(RunArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth(RunArgs),
    /// Cross-validation or L-curve over a λ grid.
    Select(RunArgs),
    /// Print mesh statistics as JSON.
    MeshInfo {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the mesh (.off, or a directory of containers).
        #[arg(long)]
        write: Option<PathBuf>,
    },
}

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code)
}

fn setup_pool(cfg: &RunConfig) -> Result<(), Error> {
    let threads = if cfg.reproducible { Some(1) } else { cfg.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<Option<String>, Error> {
    let (args, write) = match &command {
        Command::FitFunc(a) | Command::FitCov(a) | Command::Synth(a) | Command::Select(a) => (a, None),
        Command::MeshInfo { run, write } => (run, write.as_deref()),
    };
    let cfg = args.resolve()?;
    setup_pool(&cfg)?;
    log::debug!("resolved config: {cfg:?}");
    match command {
        Command::FitFunc(_) => commands::fit_func(&cfg)?,
        Command::FitCov(_) => commands::fit_cov(&cfg)?,
        Command::Synth(_) => commands::synth(&cfg)?,
        Command::Select(_) => commands::select(&cfg)?,
        Command::MeshInfo { .. } => return commands::mesh_info(&cfg, write).map(Some),
    }
    Ok(None)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("IPCA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("UsageError", e.to_string().trim(), EXIT_INPUT),
    };
    match run(cli.command) {
        Ok(Some(text)) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INPUT };
            fail(e.kind(), &e.to_string(), code)
        }
    }
}
