use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qbsde_cli::{load_config, run, Overrides};

/// Regression Monte Carlo solvers for superquadratic BSDEs and path-dependent FBSDEs.
#[derive(Parser, Debug)]
#[command(name = "qbsde", version)]
struct Args {
    /// Run description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `numerics.n_paths`.
    #[arg(long)]
    paths: Option<usize>,
    /// Overrides `numerics.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let overrides = Overrides { seed: args.seed, paths: args.paths, steps: args.steps, out: args.out };
    let result = load_config(&args.config, &overrides).and_then(|cfg| run(&cfg));
    match result {
        Ok(report) => {
            if !args.quiet {
                println!("{}", report.summary);
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
