use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lambridge::{exit, run, with_threads, CliError, Mode, RunConfig, EXIT_CODES_HELP};

const DEFAULT_OUT_DIR: &str = "lambridge-out";

#[derive(Parser)]
#[command(name = "lambridge", version, about = "Schrödinger-bridge solver for the probabilistic Lambert problem", after_help = EXIT_CODES_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured problem and write snapshots, convergence log and manifest.
    #[command(after_help = EXIT_CODES_HELP)]
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (must be empty or absent); overrides `output_dir` in the config.
        #[arg(long, env = "LAMBRIDGE_OUT")]
        out_dir: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for the numerical kernels (default: all cores).
        #[arg(long, env = "LAMBRIDGE_THREADS")]
        threads: Option<usize>,
        /// Parse and check the config, including grid and kernel preconditions, then exit.
        #[arg(long)]
        validate_only: bool,
    },
    /// Solve only the deterministic Lambert problem between the endpoint means.
    #[command(after_help = EXIT_CODES_HELP)]
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "LAMBRIDGE_OUT")]
        out_dir: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Version => {
            println!("lambridge {}", env!("CARGO_PKG_VERSION"));
            Ok(exit::OK)
        }
        Command::Run {
            config,
            out_dir: flag,
            seed,
            threads,
            validate_only,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if validate_only {
                let p = with_threads(threads, || cfg.prepare())??;
                println!(
                    "config ok: {}D grid with {} nodes, epsilon = {:.6e} and window [{}, {}] in solver units",
                    p.grid.dim(),
                    p.grid.len(),
                    p.problem.epsilon,
                    p.problem.t0,
                    p.problem.t1
                );
                return Ok(exit::OK);
            }
            let dir = out_dir(flag, &cfg);
            let outcome = with_threads(threads, || run(&cfg, &dir, None))??;
            report(&outcome);
            Ok(outcome.exit_code)
        }
        Command::Baseline { config, out_dir: flag } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(flag, &cfg);
            let outcome = run(&cfg, &dir, Some(Mode::Baseline))?;
            report(&outcome);
            Ok(outcome.exit_code)
        }
    }
}

fn report(outcome: &lambridge::RunOutcome) {
    let m = &outcome.manifest;
    if let Some(c) = &m.convergence {
        println!(
            "bridge: {} after {} iterations (Hilbert distance {:.3e}, terminal residual {:.3e})",
            if c.converged { "converged" } else { "NOT converged" },
            c.iterations,
            c.final_hilbert_distance,
            c.residual_rho1_l1
        );
    }
    if let Some(j) = m.objective {
        println!("objective: {j:.9e}");
    }
    if let Some(b) = &m.baseline {
        println!("baseline: v0 = {:?}, miss {:.3e}", b.v0, b.terminal_miss);
        if let Some(dev) = &b.mean_deviation {
            let max = dev.iter().copied().fold(0.0, f64::max);
            println!("mean path: max deviation from arc {max:.3e}");
        }
    }
    println!("wrote {} files to {}", m.files.len() + 1, outcome.out_dir.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
