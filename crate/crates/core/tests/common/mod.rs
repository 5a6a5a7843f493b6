#![allow(dead_code)]

use fedpd::datagen::{make_quadratic_federation, FederatedDataset};
use fedpd::expcli::{ObjectiveChoice, RunConfig};
use fedpd::federation::{AlgorithmKind, ServerState};
use fedpd::objectives::{DataSample, Objective, Shard};
use fedpd::veckit::{ParamVector, Purpose, RngStream};

pub fn pv(v: &[f64]) -> ParamVector {
    ParamVector::new(v.to_vec()).unwrap()
}

pub fn point_shard(points: &[f64]) -> Shard {
    Shard::new(points.iter().map(|&p| DataSample::point(pv(&[p]))).collect()).unwrap()
}

/// Noise-free quadratic federation: every sample of client `i` is its center.
pub fn exact_quadratic(seed: u64, clients: usize, d: usize) -> (Objective, FederatedDataset) {
    let mut rng = RngStream::keyed(seed, Purpose::DataPool, 0, 0);
    let ds = make_quadratic_federation(&mut rng, clients, d, 4, 1.0, 0.0).unwrap();
    (Objective::quadratic(d, 0.0).unwrap(), ds)
}

/// Small logistic configuration that runs in well under a second.
pub fn small_logistic(kind: AlgorithmKind, clients: usize, participating: usize, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig::with_algorithm(kind);
    cfg.clients = clients;
    cfg.participating = participating;
    cfg.rounds = rounds;
    cfg.local_steps = 5;
    cfg.batch_size = 10;
    cfg.per_class = 10 * clients;
    cfg.test_per_class = 20;
    cfg.alpha = 0.3;
    cfg
}

pub fn quadratic_config(kind: AlgorithmKind, clients: usize, participating: usize, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig::with_algorithm(kind);
    cfg.objective = ObjectiveChoice::Quadratic;
    cfg.clients = clients;
    cfg.participating = participating;
    cfg.rounds = rounds;
    cfg
}

pub fn max_abs_state_diff(a: &ServerState, b: &ServerState) -> f64 {
    let mut m = a.theta.max_abs_diff(&b.theta).unwrap();
    for (x, y) in a.duals.iter().zip(&b.duals) {
        m = m.max(x.max_abs_diff(y).unwrap());
    }
    m
}

pub fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
    a.distance(b).unwrap() / b.norm2().max(1.0)
}
