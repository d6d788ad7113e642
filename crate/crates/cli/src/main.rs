use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sphgp_cli::commands::{self, CliError, CliResult, Env};
use sphgp_cli::{KernelSpec, RunConfig};

#[derive(Parser)]
#[command(
    name = "sphgp",
    version,
    about = "Variational GPs with spherical harmonic features"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` for `train`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use all cores (results reproducible to tolerance, not bitwise).
    #[arg(long, global = true, conflicts_with = "deterministic")]
    parallel: bool,
    /// Single-threaded, bit-reproducible execution (the default).
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, trace, metrics and predictions.
    Train {
        /// Replace an existing run directory for the same config.
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a checkpoint on a CSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Column schema; defaults to the one stored in the checkpoint.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Export relative eigenvalues, one CSV per kernel.
    Eigvals {
        /// `poly:<β>`, `relu:<L>` or `ntk:<L>`; repeat for overlays.
        #[arg(long = "kernel", required = true)]
        kernels: Vec<String>,
        /// Ambient dimension `d` of `S^{d-1}`.
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        max_frequency: usize,
    },
    /// Compare analytic ELBO gradients with finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_gradient: Option<String>,
    },
}

fn load_config(g: &Global) -> CliResult<(RunConfig, PathBuf)> {
    let (mut config, dir) = match &g.config {
        Some(path) => (
            RunConfig::load(path)?,
            path.parent()
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        ),
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(out) = &g.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok((config, dir))
}

fn run(cli: Cli) -> CliResult<()> {
    let env = Env::from_process(cli.global.parallel);
    let out_dir = cli.global.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Train { overwrite } => {
            let (config, dir) = load_config(&cli.global)?;
            let summary = commands::train(&config, &dir, &env, overwrite)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval {
            checkpoint,
            data,
            schema,
        } => {
            let metrics = commands::eval(&checkpoint, &data, schema.as_deref(), &out_dir, &env)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Eigvals {
            kernels,
            dim,
            max_frequency,
        } => {
            let kernels = kernels
                .iter()
                .map(|k| KernelSpec::parse(k))
                .collect::<sphgp_core::Result<Vec<_>>>()?;
            for path in commands::eigvals(&kernels, dim, max_frequency, &out_dir, &env)? {
                println!("{}", path.display());
            }
        }
        Command::Gradcheck { corrupt_gradient } => {
            let (config, _) = load_config(&cli.global)?;
            let rows = commands::gradcheck(&config, corrupt_gradient.as_deref())?;
            print!("{}", commands::format_gradcheck(&rows));
            let failures = commands::gradcheck_failures(&rows);
            if !failures.is_empty() {
                return Err(CliError::GradCheckFailed(failures));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.global.parallel { 0 } else { 1 };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}", CliError::Usage(format!("thread pool: {e}")).record());
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
