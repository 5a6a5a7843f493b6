//! Per-round diagnostics and the CSV log layer.
//!
//! CSV columns, in order: `round, train_loss, test_accuracy, grad_norm_sq,
//! primal_residual, dual_residual, max_staleness, mean_staleness,
//! mean_inexactness, diverged`. Absent values (`test_accuracy` for the
//! quadratic objective, `dual_residual` at round 0) are empty cells.
//!
//! `train_loss` is the plain objective `(1/C)Σ f_i(θ)`; proximal and dual
//! terms are never included. For FedAvg/FedSAM, which keep no local models
//! between rounds, `primal_residual` averages over this round's active
//! clients only.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::FederatedDataset;
use crate::error::{FedError, Result};
use crate::federation::ServerState;
use crate::objectives::Objective;
use crate::veckit::ParamVector;

pub const CSV_HEADER: [&str; 10] = [
    "round",
    "train_loss",
    "test_accuracy",
    "grad_norm_sq",
    "primal_residual",
    "dual_residual",
    "max_staleness",
    "mean_staleness",
    "mean_inexactness",
    "diverged",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub grad_norm_sq: f64,
    pub primal_residual: f64,
    pub dual_residual: Option<f64>,
    pub max_staleness: usize,
    pub mean_staleness: f64,
    pub mean_inexactness: f64,
    pub diverged: bool,
}

impl RoundRecord {
    /// Bitwise comparison that treats equal NaN payloads as equal.
    pub fn same_bits(&self, other: &RoundRecord) -> bool {
        let b = |x: f64| x.to_bits();
        let ob = |x: Option<f64>| x.map(f64::to_bits);
        self.round == other.round
            && b(self.train_loss) == b(other.train_loss)
            && ob(self.test_accuracy) == ob(other.test_accuracy)
            && b(self.grad_norm_sq) == b(other.grad_norm_sq)
            && b(self.primal_residual) == b(other.primal_residual)
            && ob(self.dual_residual) == ob(other.dual_residual)
            && self.max_staleness == other.max_staleness
            && b(self.mean_staleness) == b(other.mean_staleness)
            && b(self.mean_inexactness) == b(other.mean_inexactness)
            && self.diverged == other.diverged
    }
}

/// `p_r = mean_i ‖θ − θ_i‖` over clients that hold a local model.
pub fn primal_residual(state: &ServerState) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for local in state.locals.iter().flatten() {
        total += state.theta.distance(local)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `d_r = ρ‖θ^t − θ^{t−1}‖`; absent before the first round.
pub fn dual_residual(state: &ServerState, rho: f64) -> Result<Option<f64>> {
    if state.round == 0 {
        return Ok(None);
    }
    Ok(Some(rho * state.theta.distance(&state.theta_prev)?))
}

/// First round whose test accuracy reaches `target`.
pub fn rounds_to_target(records: &[RoundRecord], target: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| !r.diverged && r.test_accuracy.is_some_and(|a| a >= target))
        .map(|r| r.round)
}

/// Max and mean over clients of rounds since each dual was last written.
pub fn staleness_stats(state: &ServerState) -> (usize, f64) {
    let gaps: Vec<usize> = state
        .last_dual_update
        .iter()
        .map(|&u| state.round.saturating_sub(u))
        .collect();
    let max = gaps.iter().copied().max().unwrap_or(0);
    let mean = if gaps.is_empty() {
        0.0
    } else {
        gaps.iter().sum::<usize>() as f64 / gaps.len() as f64
    };
    (max, mean)
}

/// `(1/C)Σ_i f_i(θ)` and `‖(1/C)Σ_i ∇f_i(θ)‖²` over every shard.
pub fn global_loss_and_grad_norm_sq(obj: &Objective, dataset: &FederatedDataset, theta: &ParamVector) -> Result<(f64, f64)> {
    let c = dataset.num_clients() as f64;
    let mut loss = 0.0;
    let mut grad = ParamVector::zeros(obj.dim());
    for shard in &dataset.shards {
        loss += obj.full_loss(theta, shard)?;
        grad = grad.add_scaled(1.0, &obj.full_grad(theta, shard)?)?;
    }
    let g = grad.norm2() / c;
    Ok((loss / c, g * g))
}

/// Builds the record for the state produced by round `round`.
pub fn record_for(
    round: usize,
    obj: &Objective,
    dataset: &FederatedDataset,
    state: &ServerState,
    rho: f64,
    mean_inexactness: f64,
) -> Result<RoundRecord> {
    let (train_loss, grad_norm_sq) = global_loss_and_grad_norm_sq(obj, dataset, &state.theta)?;
    let test_accuracy = match (&dataset.test_set, obj.is_classifier()) {
        (Some(test), true) => Some(obj.predict_accuracy(&state.theta, test)?),
        _ => None,
    };
    let (max_staleness, mean_staleness) = staleness_stats(state);
    Ok(RoundRecord {
        round,
        train_loss,
        test_accuracy,
        grad_norm_sq,
        primal_residual: primal_residual(state)?,
        dual_residual: dual_residual(state, rho)?,
        max_staleness,
        mean_staleness,
        mean_inexactness,
        diverged: false,
    })
}

/// Serializes records (header first) into any writer.
pub fn write_records_to<W: Write>(writer: W, records: &[RoundRecord]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the CSV through a temp file in the same directory, then renames.
pub fn write_records(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io_err = |source| FedError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    write_records_to(&mut tmp, records).map_err(|source| FedError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let csv_err = |source| FedError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(FedError::config("csv header", format!("unexpected columns {header:?}")));
    }
    rdr.deserialize().collect::<std::result::Result<Vec<RoundRecord>, _>>().map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn record(round: usize, acc: Option<f64>) -> RoundRecord {
        RoundRecord {
            round,
            train_loss: 1.0,
            test_accuracy: acc,
            grad_norm_sq: 0.5,
            primal_residual: 0.0,
            dual_residual: Some(0.1),
            max_staleness: 0,
            mean_staleness: 0.0,
            mean_inexactness: 0.0,
            diverged: false,
        }
    }

    #[test]
    fn primal_residual_cases() {
        let mut s = ServerState::new(pv(&[0.0, 0.0]), 2);
        assert_eq!(primal_residual(&s).unwrap(), 0.0);
        s.locals = vec![Some(pv(&[1.0, 0.0])), Some(pv(&[0.0, 3.0]))];
        assert_eq!(primal_residual(&s).unwrap(), 2.0);
        s.locals[1] = None;
        assert_eq!(primal_residual(&s).unwrap(), 1.0);
    }

    #[test]
    fn dual_residual_cases() {
        let mut s = ServerState::new(pv(&[1.0]), 1);
        assert_eq!(dual_residual(&s, 2.0).unwrap(), None);
        s.round = 1;
        assert_eq!(dual_residual(&s, 2.0).unwrap(), Some(0.0));
        s.theta = pv(&[1.5]);
        assert_eq!(dual_residual(&s, 2.0).unwrap(), Some(1.0));
        assert_eq!(dual_residual(&s, 4.0).unwrap(), Some(2.0));
    }

    #[test]
    fn rounds_to_target_cases() {
        let recs: Vec<RoundRecord> = [0.1, 0.4, 0.3, 0.8]
            .iter()
            .enumerate()
            .map(|(i, &a)| record(i, Some(a)))
            .collect();
        assert_eq!(rounds_to_target(&recs, 0.0), Some(0));
        assert_eq!(rounds_to_target(&recs, 1.01), None);
        assert_eq!(rounds_to_target(&recs, 0.35), Some(1));
        let mut last = 0;
        for target in [0.0, 0.1, 0.2, 0.4, 0.5, 0.8] {
            let r = rounds_to_target(&recs, target).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn staleness_counts_rounds_since_write() {
        let mut s = ServerState::new(pv(&[0.0]), 3);
        assert_eq!(staleness_stats(&s), (0, 0.0));
        s.round = 5;
        s.last_dual_update = vec![5, 2, 4];
        assert_eq!(staleness_stats(&s), (3, 4.0 / 3.0));
    }

    #[test]
    fn csv_header_and_absent_cells() {
        let mut r = record(0, None);
        r.dual_residual = None;
        let mut buf = Vec::new();
        write_records_to(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "0,1.0,,0.5,0.0,,0,0.0,0.0,false");
    }

    fn arb_f64() -> impl Strategy<Value = f64> {
        prop_oneof![any::<f64>().prop_filter("finite", |x| x.is_finite()), Just(f64::NAN), Just(0.0)]
    }

    proptest! {
        #[test]
        fn csv_roundtrip_is_lossless(
            round in 0usize..10_000,
            vals in proptest::collection::vec(arb_f64(), 7),
            acc in proptest::option::of(0.0..=1.0f64),
            dres in proptest::option::of(arb_f64()),
            stale in 0usize..1000,
            diverged in any::<bool>(),
        ) {
            let r = RoundRecord {
                round,
                train_loss: vals[0],
                test_accuracy: acc,
                grad_norm_sq: vals[1].abs(),
                primal_residual: vals[2].abs(),
                dual_residual: dres,
                max_staleness: stale,
                mean_staleness: vals[3].abs(),
                mean_inexactness: vals[4].abs(),
                diverged,
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            write_records(&path, &[r.clone(), r.clone()]).unwrap();
            let back = read_records(&path).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert!(back[0].same_bits(&r), "{:?} vs {:?}", back[0], r);
        }
    }
}
