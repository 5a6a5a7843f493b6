use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{FedError, Result};
use crate::metrics::rounds_to_target;

use super::config::RunConfig;
use super::runner::{run_seed, RunOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Value is P/C in (0, 1]; P = round(value·C), at least 1.
    Participation,
    /// Value is K.
    LocalInterval,
    /// Value is T; K is rescaled so that T·K stays at the base config's product.
    RoundsFixedBudget,
}

impl FromStr for SweepAxis {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "participation" => Ok(SweepAxis::Participation),
            "local_interval" => Ok(SweepAxis::LocalInterval),
            "rounds_fixed_budget" => Ok(SweepAxis::RoundsFixedBudget),
            _ => Err(FedError::config(
                "axis",
                format!("unknown axis `{s}` (participation | local_interval | rounds_fixed_budget)"),
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Participation => "participation",
            SweepAxis::LocalInterval => "local_interval",
            SweepAxis::RoundsFixedBudget => "rounds_fixed_budget",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn whole(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(FedError::config(axis.to_string(), format!("value {v} is not a positive integer")))
    }
}

/// The config of one sweep cell.
pub fn cell_config(base: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Participation => {
            if !(value > 0.0 && value <= 1.0) {
                return Err(FedError::config("participation", format!("ratio {value} outside (0, 1]")));
            }
            cfg.participating = ((value * base.clients as f64).round() as usize).max(1);
        }
        SweepAxis::LocalInterval => cfg.local_steps = whole(axis, value)?,
        SweepAxis::RoundsFixedBudget => {
            let budget = base.rounds * base.local_steps;
            let t = whole(axis, value)?;
            if budget % t != 0 {
                return Err(FedError::config(
                    "rounds_fixed_budget",
                    format!("T={t} does not divide the budget T·K={budget}"),
                ));
            }
            cfg.rounds = t;
            cfg.local_steps = budget / t;
            assert_eq!(cfg.rounds * cfg.local_steps, budget);
        }
    }
    cfg.run_id = format!("{}_{}_{}", base.run_id, axis, value);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value, NaN mean for none.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: f64,
    pub config: RunConfig,
    pub runs: Vec<RunOutcome>,
    pub final_accuracy: MeanStd,
    pub final_grad_norm_sq: MeanStd,
    /// Per target: statistics over the seeds that reached it, and how many did.
    pub rounds_to_target: Vec<(f64, MeanStd, usize)>,
    pub diverged: usize,
}

impl SweepCell {
    fn summarize(value: f64, config: RunConfig, runs: Vec<RunOutcome>) -> Self {
        let finals: Vec<_> = runs
            .iter()
            .filter(|r| !r.status.is_diverged())
            .filter_map(|r| r.final_record())
            .collect();
        let acc: Vec<f64> = finals.iter().filter_map(|r| r.test_accuracy).collect();
        let gns: Vec<f64> = finals.iter().map(|r| r.grad_norm_sq).collect();
        let rounds_to_target = config
            .target_accuracies
            .iter()
            .map(|&t| {
                let hits: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| rounds_to_target(&r.records, t))
                    .map(|r| r as f64)
                    .collect();
                (t, MeanStd::of(&hits), hits.len())
            })
            .collect();
        Self {
            value,
            final_accuracy: MeanStd::of(&acc),
            final_grad_norm_sq: MeanStd::of(&gns),
            rounds_to_target,
            diverged: runs.iter().filter(|r| r.status.is_diverged()).count(),
            config,
            runs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
    pub summary_path: PathBuf,
}

/// Runs every (cell, seed) pair in parallel and writes per-run CSVs plus
/// `<run_id>_<axis>_summary.csv`. Results do not depend on execution order.
pub fn sweep(base: &RunConfig, spec: &SweepSpec, seeds: &[u64], out_dir: &Path) -> Result<SweepReport> {
    if spec.values.is_empty() {
        return Err(FedError::config("values", "sweep needs at least one value"));
    }
    if seeds.is_empty() {
        return Err(FedError::config("seeds", "sweep needs at least one seed"));
    }
    let configs = spec
        .values
        .iter()
        .map(|&v| cell_config(base, spec.axis, v))
        .collect::<Result<Vec<_>>>()?;
    if spec.axis == SweepAxis::RoundsFixedBudget {
        let budget = base.rounds * base.local_steps;
        assert!(configs.iter().all(|c| c.rounds * c.local_steps == budget));
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, seed)| run_seed(&configs[c], seed, out_dir))
        .collect::<Vec<_>>();

    let mut per_cell: Vec<Vec<RunOutcome>> = vec![Vec::new(); configs.len()];
    for ((c, _), r) in jobs.iter().zip(results) {
        per_cell[*c].push(r?);
    }
    let cells: Vec<SweepCell> = spec
        .values
        .iter()
        .zip(configs)
        .zip(per_cell)
        .map(|((&v, cfg), runs)| SweepCell::summarize(v, cfg, runs))
        .collect();

    let summary_path = out_dir.join(format!("{}_{}_summary.csv", base.run_id, spec.axis));
    write_summary(&summary_path, spec.axis, &base.target_accuracies, &cells)?;
    Ok(SweepReport {
        axis: spec.axis,
        cells,
        summary_path,
    })
}

fn write_summary(path: &Path, axis: SweepAxis, targets: &[f64], cells: &[SweepCell]) -> Result<()> {
    let csv_err = |source| FedError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let io_err = |source| FedError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    {
        let mut w = csv::Writer::from_writer(&mut tmp);
        let mut header: Vec<String> = [
            axis.to_string().as_str(),
            "participating",
            "local_steps",
            "rounds",
            "seeds",
            "diverged",
            "final_accuracy_mean",
            "final_accuracy_std",
            "final_grad_norm_sq_mean",
            "final_grad_norm_sq_std",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for t in targets {
            header.push(format!("rounds_to_{t}_mean"));
            header.push(format!("rounds_to_{t}_std"));
            header.push(format!("rounds_to_{t}_reached"));
        }
        w.write_record(&header).map_err(csv_err)?;
        for cell in cells {
            let mut row = vec![
                cell.value.to_string(),
                cell.config.participating.to_string(),
                cell.config.local_steps.to_string(),
                cell.config.rounds.to_string(),
                cell.runs.len().to_string(),
                cell.diverged.to_string(),
                cell.final_accuracy.mean.to_string(),
                cell.final_accuracy.std.to_string(),
                cell.final_grad_norm_sq.mean.to_string(),
                cell.final_grad_norm_sq.std.to_string(),
            ];
            for (_, stats, reached) in &cell.rounds_to_target {
                row.push(stats.mean.to_string());
                row.push(stats.std.to_string());
                row.push(reached.to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
