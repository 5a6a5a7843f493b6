mod common;

use common::{exact_quadratic, max_abs_state_diff, point_shard, pv, rel_err};
use fedpd::datagen::{quadratic_optimum, Concentration, DatasetMeta, FederatedDataset};
use fedpd::federation::{
    plan_round, run_round, AlgorithmKind, RoundContext, RoundOutcome, RoundPlan, ServerState,
};
use fedpd::local_solvers::SolverConfig;
use fedpd::objectives::{DataSample, Objective, ObjectiveKind, QuadraticMode, Shard};
use fedpd::veckit::ParamVector;

fn solver(k: usize, lr: f64, rho: f64) -> SolverConfig {
    SolverConfig {
        local_steps: k,
        lr,
        lr_decay: 1.0,
        batch_size: 4,
        rho,
        ..SolverConfig::default()
    }
}

fn dataset_of(shards: Vec<Shard>) -> FederatedDataset {
    let feature_dim = shards[0].feature_dim();
    FederatedDataset {
        shards,
        test_set: None,
        meta: DatasetMeta {
            num_classes: 0,
            feature_dim,
            alpha: Concentration::Iid,
            with_replacement: true,
        },
        index_sets: None,
    }
}

/// Runs `rounds` rounds and returns `(state before, outcome)` per round.
fn drive(
    kind: AlgorithmKind,
    ctx: &RoundContext<'_>,
    start: ServerState,
    participating: usize,
    rounds: usize,
) -> Vec<(ServerState, RoundOutcome)> {
    let c = start.num_clients();
    let mut state = start;
    let mut trace = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let plan = plan_round(ctx.master_seed, t, c, participating).unwrap();
        let out = run_round(kind, &state, &plan, ctx).unwrap();
        let next = out.state.clone();
        trace.push((state, out));
        state = next;
    }
    trace
}

fn ctx<'a>(obj: &'a Objective, ds: &'a FederatedDataset, s: &'a SolverConfig, seed: u64) -> RoundContext<'a> {
    RoundContext {
        objective: obj,
        dataset: ds,
        solver: s,
        master_seed: seed,
        feddyn_use_next_dual: false,
    }
}

#[test]
fn full_participation_engines_coincide() {
    let cfg = common::small_logistic(AlgorithmKind::FedPd, 8, 8, 50);
    let obj = cfg.build_objective().unwrap();
    let ds = cfg.build_dataset(3).unwrap();
    let s = cfg.solver_config();
    let c = ctx(&obj, &ds, &s, 3);
    let start = ServerState::new(cfg.initial_params(&obj, 3).unwrap(), 8);
    let pd = drive(AlgorithmKind::FedPd, &c, start.clone(), 8, 50);
    let admm = drive(AlgorithmKind::FedAdmm, &c, start.clone(), 8, 50);
    let apd = drive(AlgorithmKind::AFedPd, &c, start, 8, 50);
    for ((a, b), e) in pd.iter().zip(&admm).zip(&apd) {
        assert!(max_abs_state_diff(&a.1.state, &b.1.state) <= 1e-12);
        assert!(max_abs_state_diff(&a.1.state, &e.1.state) <= 1e-12);
    }
}

#[test]
fn fedpd_dual_step_is_local_drift() {
    let (obj, ds) = exact_quadratic(1, 5, 3);
    let s = solver(10, 0.1, 0.5);
    let c = ctx(&obj, &ds, &s, 1);
    for (pre, out) in drive(AlgorithmKind::FedPd, &c, ServerState::new(ParamVector::zeros(3), 5), 5, 10) {
        for i in 0..5 {
            let local = out.state.locals[i].as_ref().unwrap();
            let expected = pre.duals[i].add_scaled(0.5, &local.sub(&pre.theta).unwrap()).unwrap();
            assert!(out.state.duals[i].max_abs_diff(&expected).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn fedpd_fixed_point_is_consensus_mean() {
    let ds = dataset_of(vec![point_shard(&[1.0]), point_shard(&[3.0])]);
    let obj = Objective::quadratic(1, 0.0).unwrap();
    let s = solver(200, 0.1, 1.0);
    let c = ctx(&obj, &ds, &s, 0);
    let trace = drive(AlgorithmKind::FedPd, &c, ServerState::new(pv(&[-4.0]), 2), 2, 100);
    let last = &trace.last().unwrap().1.state;
    assert!((last.theta.get(0).unwrap() - 2.0).abs() <= 1e-9);
    // at the fixed point λ_i = −∇f_i(θ★)
    assert!((last.duals[0].get(0).unwrap() - (1.0 - 2.0)).abs() <= 1e-9);
    assert!((last.duals[1].get(0).unwrap() - (3.0 - 2.0)).abs() <= 1e-9);
}

#[test]
fn zero_gradient_state_is_fixed() {
    let ds = dataset_of(vec![
        Shard::new(vec![DataSample::regression(ParamVector::zeros(2), 0.0)]).unwrap();
        3
    ]);
    let obj = Objective::new(ObjectiveKind::Quadratic(QuadraticMode::Regression), 2, 0, 0.0).unwrap();
    let s = solver(5, 0.2, 0.3);
    let c = ctx(&obj, &ds, &s, 0);
    let theta0 = pv(&[0.5, -2.0]);
    for kind in [AlgorithmKind::FedPd, AlgorithmKind::AFedPd, AlgorithmKind::FedDyn, AlgorithmKind::FedAdmm] {
        let p = if kind == AlgorithmKind::FedPd { 3 } else { 1 };
        for (_, out) in drive(kind, &c, ServerState::new(theta0.clone(), 3), p, 10) {
            assert_eq!(out.state.theta, theta0, "{kind}");
        }
    }
}

#[test]
fn averaged_dual_recursion_holds_under_partial_participation() {
    let cfg = common::small_logistic(AlgorithmKind::AFedPd, 10, 3, 40);
    let obj = cfg.build_objective().unwrap();
    let ds = cfg.build_dataset(5).unwrap();
    let s = cfg.solver_config();
    let c = ctx(&obj, &ds, &s, 5);
    let start = ServerState::new(cfg.initial_params(&obj, 5).unwrap(), 10);
    for (pre, out) in drive(AlgorithmKind::AFedPd, &c, start, 3, 40) {
        let before = pre.mean_dual().unwrap();
        let expected = before
            .add_scaled(s.rho, &out.aggregate.sub(&pre.theta).unwrap())
            .unwrap();
        let after = out.state.mean_dual().unwrap();
        assert!(after.distance(&expected).unwrap() <= 1e-12 * (1.0 + before.norm2()));
        // θ = θ̄ + λ̄/ρ
        let model = out.aggregate.add_scaled(1.0 / s.rho, &after).unwrap();
        assert!(rel_err(&out.state.theta, &model) <= 1e-12);
    }
}

#[test]
fn feddyn_global_dual_matches_replay() {
    let cfg = common::small_logistic(AlgorithmKind::FedDyn, 10, 4, 30);
    let obj = cfg.build_objective().unwrap();
    let ds = cfg.build_dataset(2).unwrap();
    let s = cfg.solver_config();
    let c = ctx(&obj, &ds, &s, 2);
    let start = ServerState::new(cfg.initial_params(&obj, 2).unwrap(), 10);
    let mut replay = ParamVector::zeros(obj.dim());
    let scale = s.rho * 4.0 / 10.0;
    for (pre, out) in drive(AlgorithmKind::FedDyn, &c, start, 4, 30) {
        let used = pre.global_dual.clone();
        replay = replay.add_scaled(scale, &out.aggregate.sub(&pre.theta).unwrap()).unwrap();
        assert!(rel_err(&out.state.global_dual, &replay) <= 1e-12);
        let model = out.aggregate.add_scaled(1.0 / s.rho, &used).unwrap();
        assert!(rel_err(&out.state.theta, &model) <= 1e-12);
    }
}

#[test]
fn feddyn_full_participation_dual_step() {
    let (obj, ds) = exact_quadratic(4, 6, 2);
    let s = solver(8, 0.1, 0.2);
    let mut c = ctx(&obj, &ds, &s, 4);
    c.feddyn_use_next_dual = true;
    for (pre, out) in drive(AlgorithmKind::FedDyn, &c, ServerState::new(ParamVector::zeros(2), 6), 6, 10) {
        let step = out.state.global_dual.sub(&pre.global_dual).unwrap();
        let expected = out.aggregate.sub(&pre.theta).unwrap().scale(0.2).unwrap();
        assert!(step.max_abs_diff(&expected).unwrap() <= 1e-12);
        let model = out.aggregate.add_scaled(5.0, &out.state.global_dual).unwrap();
        assert!(out.state.theta.max_abs_diff(&model).unwrap() <= 1e-12);
    }
}

#[test]
fn virtual_dual_update_is_unbiased() {
    let (obj, ds) = exact_quadratic(9, 10, 2);
    let s = solver(5, 0.1, 0.5);
    let c = ctx(&obj, &ds, &s, 9);
    let warm = drive(AlgorithmKind::AFedPd, &c, ServerState::new(ParamVector::zeros(2), 10), 3, 5);
    let state = warm.last().unwrap().1.state.clone();

    // noise-free shards make local solves deterministic, so the full round is the exact target
    let full = run_round(AlgorithmKind::AFedPd, &state, &RoundPlan::full(10).unwrap(), &c).unwrap();
    let target = full.aggregate.sub(&state.theta).unwrap().scale(s.rho).unwrap();

    let trials = 2000;
    let mut sum = vec![0.0; 2];
    let mut sum_sq = vec![0.0; 2];
    for t in 0..trials {
        let plan = plan_round(1000 + t, 0, 10, 3).unwrap();
        let out = run_round(AlgorithmKind::AFedPd, &state, &plan, &c).unwrap();
        let inc = out.aggregate.sub(&state.theta).unwrap().scale(s.rho).unwrap();
        for j in 0..2 {
            let v = inc.get(j).unwrap();
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let n = trials as f64;
    for j in 0..2 {
        let mean = sum[j] / n;
        let var = (sum_sq[j] / n - mean * mean) * n / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - target.get(j).unwrap()).abs() <= 3.0 * se, "coord {j}: {mean} vs {:?}", target);
    }
}

#[test]
fn staleness_bookkeeping() {
    let (obj, ds) = exact_quadratic(2, 10, 2);
    let s = solver(3, 0.1, 0.5);
    let c = ctx(&obj, &ds, &s, 2);
    let mut last = vec![0usize; 10];
    for (pre, out) in drive(AlgorithmKind::FedAdmm, &c, ServerState::new(ParamVector::zeros(2), 10), 1, 60) {
        for &i in out.plan.active() {
            last[i] = pre.round + 1;
        }
        assert_eq!(out.state.last_dual_update, last);
        for i in (0..10).filter(|i| !out.plan.contains(*i)) {
            assert_eq!(out.state.duals[i], pre.duals[i]);
        }
    }
    for (_, out) in drive(AlgorithmKind::AFedPd, &c, ServerState::new(ParamVector::zeros(2), 10), 1, 30) {
        assert!(out.state.last_dual_update.iter().all(|&u| u == out.state.round));
    }
}

#[test]
fn fedavg_single_step_is_gradient_descent() {
    let (obj, ds) = exact_quadratic(6, 7, 3);
    let s = solver(1, 0.3, 0.1);
    let c = ctx(&obj, &ds, &s, 6);
    let theta0 = pv(&[0.4, -1.0, 2.0]);
    let out = run_round(AlgorithmKind::FedAvg, &ServerState::new(theta0.clone(), 7), &RoundPlan::full(7).unwrap(), &c)
        .unwrap();
    let mut g = ParamVector::zeros(3);
    for shard in &ds.shards {
        g = g.add_scaled(1.0 / 7.0, &obj.full_grad(&theta0, shard).unwrap()).unwrap();
    }
    let expected = theta0.add_scaled(-0.3, &g).unwrap();
    assert!(out.state.theta.max_abs_diff(&expected).unwrap() <= 1e-12);
    assert!(out.state.duals.iter().all(|d| d.norm2() == 0.0));
}

#[test]
fn fedavg_single_client_is_its_local_output() {
    let (obj, ds) = exact_quadratic(7, 5, 2);
    let s = solver(6, 0.1, 0.1);
    let c = ctx(&obj, &ds, &s, 7);
    for (_, out) in drive(AlgorithmKind::FedAvg, &c, ServerState::new(ParamVector::zeros(2), 5), 1, 5) {
        let i = out.plan.active()[0];
        assert_eq!(&out.state.theta, out.state.locals[i].as_ref().unwrap());
    }
}

#[test]
fn identical_shards_match_single_client_training() {
    // one sample per shard makes every minibatch the same, whatever the stream
    let shard = Shard::new(vec![DataSample::point(pv(&[2.0, -1.0]))]).unwrap();
    let obj = Objective::quadratic(2, 0.0).unwrap();
    let s = solver(3, 0.1, 0.1);
    let many = dataset_of(vec![shard.clone(); 4]);
    let one = dataset_of(vec![shard]);
    let a = drive(AlgorithmKind::FedAvg, &ctx(&obj, &many, &s, 0), ServerState::new(ParamVector::zeros(2), 4), 4, 5);
    let b = drive(AlgorithmKind::FedAvg, &ctx(&obj, &one, &s, 0), ServerState::new(ParamVector::zeros(2), 1), 1, 5);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.1.state.theta, y.1.state.theta);
    }
}

#[test]
fn fedsam_zero_radius_and_duals() {
    let (obj, ds) = exact_quadratic(8, 6, 2);
    let mut s = solver(4, 0.1, 0.1);
    s.sam_radius = 0.0;
    let c = ctx(&obj, &ds, &s, 8);
    let start = ServerState::new(ParamVector::zeros(2), 6);
    let avg = drive(AlgorithmKind::FedAvg, &c, start.clone(), 2, 10);
    let sam = drive(AlgorithmKind::FedSam, &c, start, 2, 10);
    for (a, b) in avg.iter().zip(&sam) {
        assert_eq!(a.1.state, b.1.state);
        assert!(b.1.state.duals.iter().all(|d| d.norm2() == 0.0));
    }
}

#[test]
fn fedsam_single_client_lands_near_optimum() {
    let ds = dataset_of(vec![point_shard(&[1.5, 2.5])]);
    let obj = Objective::quadratic(1, 0.0).unwrap();
    let mut s = solver(10, 0.1, 0.1);
    s.sam_radius = 0.05;
    let c = ctx(&obj, &ds, &s, 0);
    let trace = drive(AlgorithmKind::FedSam, &c, ServerState::new(pv(&[-3.0]), 1), 1, 100);
    let theta = trace.last().unwrap().1.state.theta.get(0).unwrap();
    assert!((theta - 2.0).abs() <= s.sam_radius, "{theta}");
}

#[test]
fn afedpdsam_reaches_same_optimum() {
    let (obj, ds) = exact_quadratic(10, 10, 3);
    let star = quadratic_optimum(&ds, 0.0).unwrap();
    let start = ServerState::new(ParamVector::zeros(3), 10);
    let s = solver(10, 0.1, 0.5);
    let plain = drive(AlgorithmKind::AFedPd, &ctx(&obj, &ds, &s, 10), start.clone(), 5, 300);
    assert!(plain.last().unwrap().1.state.theta.distance(&star).unwrap() <= 1e-3);

    // the SAM fixed point is biased by an amount that shrinks with the radius
    let mut gaps = Vec::new();
    for radius in [0.05, 0.01] {
        let mut s = solver(10, 0.1, 0.5);
        s.sam_radius = radius;
        let sam = drive(AlgorithmKind::AFedPdSam, &ctx(&obj, &ds, &s, 10), start.clone(), 5, 300);
        gaps.push(sam.last().unwrap().1.state.theta.distance(&star).unwrap());
    }
    assert!(gaps[1] < gaps[0], "{gaps:?}");
    assert!(gaps[1] <= 1e-3, "{gaps:?}");
}
