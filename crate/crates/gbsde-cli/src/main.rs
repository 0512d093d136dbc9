//! `gbsde` — solve multi-dimensional G-BSDEs on a grid, cross-validate
//! against the PDE oracle, and run the property checks.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on solver or i/o
//! failures.

use clap::{Args, Parser, Subcommand, ValueEnum};
use gbsde_cli::config::{self, ResolvedRun};
use gbsde_cli::runner::{self, CheckKind};
use gbsde_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gbsde", version, about = "Numerical laboratory for multi-dimensional BSDEs driven by G-Brownian motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (alternative to --config).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (the GBSDE_THREADS environment variable wins).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Probabilistic solve on the configured grid.
    Solve(RunArgs),
    /// Independent finite-difference solve of the associated PDE system.
    Pde(RunArgs),
    /// Cross-validate both solvers over a refinement ladder.
    Compare(RunArgs),
    /// Run one named property check.
    Check {
        #[arg(value_enum)]
        which: CheckArg,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Simulate forward paths under a scenario policy.
    Simulate {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, default_value_t = 100)]
        paths: usize,
        /// `uniform` or `fixed:<index>`.
        #[arg(long, default_value = "uniform")]
        policy: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    Comparison,
    Stability,
    Regularity,
    Contraction,
    Kmono,
    #[value(name = "forward-moments")]
    ForwardMoments,
}

impl From<CheckArg> for CheckKind {
    fn from(value: CheckArg) -> Self {
        match value {
            CheckArg::Comparison => CheckKind::Comparison,
            CheckArg::Stability => CheckKind::Stability,
            CheckArg::Regularity => CheckKind::Regularity,
            CheckArg::Contraction => CheckKind::Contraction,
            CheckArg::Kmono => CheckKind::Kmono,
            CheckArg::ForwardMoments => CheckKind::ForwardMoments,
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::InvalidInput(_) => 2,
        _ => 3,
    }
}

fn load_run(args: &RunArgs) -> Result<ResolvedRun, Error> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?
        }
        (None, Some(name)) => config::preset_config(name),
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either --config or --preset, not both".into()))
        }
        (None, None) => {
            return Err(Error::Config("a run needs --config PATH or --preset NAME".into()))
        }
    };
    if let Some(out) = &args.out {
        cfg.outputs.dir = out.display().to_string();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    config::resolve(cfg)
}

fn init_threads(args: &RunArgs) {
    let env_threads = std::env::var("GBSDE_THREADS").ok().and_then(|s| s.parse::<usize>().ok());
    if let Some(t) = env_threads.or(args.threads) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    let (args, action): (RunArgs, Box<dyn FnOnce(&ResolvedRun) -> Result<gbsde_cli::ResultEnvelope, Error>>) =
        match cli.command {
            Command::Solve(args) => (args, Box::new(runner::run_solve)),
            Command::Pde(args) => (args, Box::new(runner::run_pde)),
            Command::Compare(args) => (args, Box::new(runner::run_compare)),
            Command::Check { which, args } => {
                let kind: CheckKind = which.into();
                (args, Box::new(move |run| runner::run_check(run, kind)))
            }
            Command::Simulate { args, paths, policy } => {
                (args, Box::new(move |run| runner::run_simulate(run, paths, &policy)))
            }
        };
    init_threads(&args);
    let run = load_run(&args)?;
    let envelope = action(&run)?;
    println!("{}", runner::summary_line(&envelope));
    println!("wrote {}/result.json", run.outputs.dir);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
