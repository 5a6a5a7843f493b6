use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::Result;
use crate::federation::{plan_round, run_round, RoundContext, RoundOutcome, ServerState};
use crate::metrics::{record_for, write_records, RoundRecord};

use super::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    /// All rounds ran and the final `grad_norm_sq` is within `converge_tol`.
    Converged,
    Completed,
    Diverged { round: usize },
}

impl RunStatus {
    pub fn is_diverged(self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Converged => f.write_str("converged"),
            RunStatus::Completed => f.write_str("completed"),
            RunStatus::Diverged { round } => write!(f, "diverged at round {round}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub status: RunStatus,
    /// Last state that passed all checks.
    pub final_state: ServerState,
    pub csv_path: Option<PathBuf>,
}

impl RunOutcome {
    pub fn final_record(&self) -> Option<&RoundRecord> {
        self.records.last()
    }
}

pub fn csv_path(out_dir: &Path, run_id: &str, seed: u64) -> PathBuf {
    out_dir.join(format!("{run_id}_{seed}.csv"))
}

fn diverged_record(round: usize, last: &ServerState) -> RoundRecord {
    let (max_staleness, mean_staleness) = crate::metrics::staleness_stats(last);
    RoundRecord {
        round,
        train_loss: f64::NAN,
        test_accuracy: None,
        grad_norm_sq: f64::NAN,
        primal_residual: f64::NAN,
        dual_residual: None,
        max_staleness,
        mean_staleness,
        mean_inexactness: f64::NAN,
        diverged: true,
    }
}

/// Runs `cfg` under `seed` in memory, handing every committed round to `observe`.
pub fn simulate_with<F>(cfg: &RunConfig, seed: u64, mut observe: F) -> Result<RunOutcome>
where
    F: FnMut(&RoundOutcome),
{
    cfg.validate()?;
    let objective = cfg.build_objective()?;
    let dataset = cfg.build_dataset(seed)?;
    let solver = cfg.solver_config();
    let ctx = RoundContext {
        objective: &objective,
        dataset: &dataset,
        solver: &solver,
        master_seed: seed,
        feddyn_use_next_dual: cfg.feddyn_use_next_dual,
    };
    let mut state = ServerState::new(cfg.initial_params(&objective, seed)?, cfg.clients);
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut status = None;

    for t in 0..cfg.rounds {
        let plan = plan_round(seed, t, cfg.clients, cfg.participating)?;
        let outcome = match run_round(cfg.algorithm, &state, &plan, &ctx) {
            Ok(o) => o,
            Err(e) if e.is_divergence() => {
                status = Some(RunStatus::Diverged { round: t });
                break;
            }
            Err(e) => return Err(e),
        };
        match record_for(t, &objective, &dataset, &outcome.state, cfg.rho, outcome.mean_inexactness()) {
            Ok(r) if r.train_loss.is_finite() && r.grad_norm_sq.is_finite() => {
                observe(&outcome);
                records.push(r);
                state = outcome.state;
            }
            Ok(_) => {
                status = Some(RunStatus::Diverged { round: t });
                break;
            }
            Err(e) if e.is_divergence() => {
                status = Some(RunStatus::Diverged { round: t });
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let status = match status {
        Some(RunStatus::Diverged { round }) => {
            records.push(diverged_record(round, &state));
            RunStatus::Diverged { round }
        }
        _ if records.last().is_some_and(|r| r.grad_norm_sq <= cfg.converge_tol) => RunStatus::Converged,
        _ => RunStatus::Completed,
    };
    Ok(RunOutcome {
        seed,
        records,
        status,
        final_state: state,
        csv_path: None,
    })
}

pub fn simulate(cfg: &RunConfig, seed: u64) -> Result<RunOutcome> {
    simulate_with(cfg, seed, |_| {})
}

/// Runs one seed and writes `<run_id>_<seed>.csv` into `out_dir`.
pub fn run_seed(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<RunOutcome> {
    let mut outcome = simulate(cfg, seed)?;
    let path = csv_path(out_dir, &cfg.run_id, seed);
    write_records(&path, &outcome.records)?;
    outcome.csv_path = Some(path);
    Ok(outcome)
}

/// Runs every replication seed of `cfg` in parallel; results follow seed order.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    cfg.replication_seeds()
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, out_dir))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
