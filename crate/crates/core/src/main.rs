use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedpd::expcli::{parse_config, run, sweep, RunConfig, SweepAxis, SweepSpec};
use fedpd::{FedError, Result};

/// Deterministic federated primal-dual simulator.
#[derive(Debug, Parser)]
#[command(name = "fedpd", version)]
struct Cli {
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true, env = "FEDPD_OUT_DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one configuration for each of its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep one axis over a list of values and seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// participation | local_interval | rounds_fixed_budget
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| FedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn out_dir(cli_out: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli_out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Returns whether any run diverged.
fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let dir = out_dir(cli.out, &cfg);
            let outcomes = run(&cfg, &dir)?;
            for o in &outcomes {
                let last = o.final_record();
                println!(
                    "seed {}: {} after {} rounds, grad_norm_sq {:e}, test_accuracy {} -> {}",
                    o.seed,
                    o.status,
                    o.records.len(),
                    last.map_or(f64::NAN, |r| r.grad_norm_sq),
                    last.and_then(|r| r.test_accuracy).map_or("-".into(), |a| format!("{a:.4}")),
                    o.csv_path.as_deref().map_or("-".into(), |p| p.display().to_string()),
                );
            }
            Ok(outcomes.iter().any(|o| o.status.is_diverged()))
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
        } => {
            let cfg = load(&config)?;
            let dir = out_dir(cli.out, &cfg);
            let seeds = if seeds.is_empty() { cfg.replication_seeds() } else { seeds };
            let report = sweep(&cfg, &SweepSpec { axis, values }, &seeds, &dir)?;
            for cell in &report.cells {
                println!(
                    "{}={}: accuracy {:.4} ± {:.4}, grad_norm_sq {:e} ± {:e}, diverged {}/{}",
                    report.axis,
                    cell.value,
                    cell.final_accuracy.mean,
                    cell.final_accuracy.std,
                    cell.final_grad_norm_sq.mean,
                    cell.final_grad_norm_sq.std,
                    cell.diverged,
                    cell.runs.len(),
                );
            }
            println!("summary -> {}", report.summary_path.display());
            Ok(report.cells.iter().any(|c| c.diverged > 0))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
