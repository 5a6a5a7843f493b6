//! Server-side round engine for the primal and primal-dual families.
//!
//! A round is a transaction: the active clients' local solves are pure
//! functions of `(state, client, round)` and may run in parallel; the
//! aggregation and dual updates are then committed single-threaded, summing
//! over clients in ascending id order.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;

use crate::datagen::FederatedDataset;
use crate::error::{FedError, Result};
use crate::local_solvers::{sam_local_train, sgd_local_train, LocalProblem, LocalResult, SolverConfig};
use crate::objectives::Objective;
use crate::veckit::{mean, ParamVector, Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlgorithmKind {
    FedAvg,
    FedSam,
    FedPd,
    FedAdmm,
    FedDyn,
    AFedPd,
    AFedPdSam,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 7] = [
        AlgorithmKind::FedAvg,
        AlgorithmKind::FedSam,
        AlgorithmKind::FedPd,
        AlgorithmKind::FedAdmm,
        AlgorithmKind::FedDyn,
        AlgorithmKind::AFedPd,
        AlgorithmKind::AFedPdSam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::FedAvg => "fedavg",
            AlgorithmKind::FedSam => "fedsam",
            AlgorithmKind::FedPd => "fedpd",
            AlgorithmKind::FedAdmm => "fedadmm",
            AlgorithmKind::FedDyn => "feddyn",
            AlgorithmKind::AFedPd => "afedpd",
            AlgorithmKind::AFedPdSam => "afedpdsam",
        }
    }

    pub fn is_primal_dual(self) -> bool {
        !matches!(self, AlgorithmKind::FedAvg | AlgorithmKind::FedSam)
    }

    pub fn uses_sam(self) -> bool {
        matches!(self, AlgorithmKind::FedSam | AlgorithmKind::AFedPdSam)
    }

    pub fn requires_full_participation(self) -> bool {
        self == AlgorithmKind::FedPd
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| FedError::param(format!("unknown algorithm `{s}`")))
    }
}

impl serde::Serialize for AlgorithmKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for AlgorithmKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sorted, duplicate-free set of active clients for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    active: Vec<usize>,
}

impl RoundPlan {
    pub fn new(mut active: Vec<usize>, clients: usize) -> Result<Self> {
        if active.is_empty() {
            return Err(FedError::param("a round needs at least one active client"));
        }
        active.sort_unstable();
        if active.windows(2).any(|w| w[0] == w[1]) {
            return Err(FedError::param("duplicate client in round plan"));
        }
        if let Some(&last) = active.last() {
            if last >= clients {
                return Err(FedError::param(format!("client {last} outside 0..{clients}")));
            }
        }
        Ok(Self { active })
    }

    pub fn full(clients: usize) -> Result<Self> {
        Self::new((0..clients).collect(), clients)
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn contains(&self, client: usize) -> bool {
        self.active.binary_search(&client).is_ok()
    }
}

/// Uniform subset of `p` out of `c` clients, drawn without replacement.
pub fn sample_clients(rng: &mut RngStream, c: usize, p: usize) -> Result<RoundPlan> {
    if p == 0 || p > c {
        return Err(FedError::param(format!(
            "participating clients P={p} must satisfy 1 <= P <= C={c}"
        )));
    }
    RoundPlan::new(index::sample(rng, c, p).into_vec(), c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta: ParamVector,
    pub theta_prev: ParamVector,
    pub duals: Vec<ParamVector>,
    /// FedDyn's global dual; stays zero for every other algorithm.
    pub global_dual: ParamVector,
    /// Each client's latest local model, where one is kept.
    pub locals: Vec<Option<ParamVector>>,
    /// Number of completed rounds.
    pub round: usize,
    /// Value of `round` when each dual was last written.
    pub last_dual_update: Vec<usize>,
}

impl ServerState {
    /// `θ_i^0 = θ^0` and `λ_i^0 = 0` for every client.
    pub fn new(theta0: ParamVector, clients: usize) -> Self {
        let d = theta0.len();
        Self {
            theta_prev: theta0.clone(),
            duals: vec![ParamVector::zeros(d); clients],
            global_dual: ParamVector::zeros(d),
            locals: vec![Some(theta0.clone()); clients],
            round: 0,
            last_dual_update: vec![0; clients],
            theta: theta0,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.duals.len()
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `λ̄ = (1/C)·Σ_i λ_i`.
    pub fn mean_dual(&self) -> Result<ParamVector> {
        mean(self.duals.iter(), self.dim())
    }
}

/// Everything a round needs besides the server state.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub objective: &'a Objective,
    pub dataset: &'a FederatedDataset,
    pub solver: &'a SolverConfig,
    pub master_seed: u64,
    /// FedDyn: use the post-update global dual in the model update.
    pub feddyn_use_next_dual: bool,
}

impl RoundContext<'_> {
    fn check(&self, state: &ServerState) -> Result<()> {
        let c = self.dataset.num_clients();
        if state.num_clients() != c {
            return Err(FedError::param(format!(
                "state tracks {} clients but the dataset has {c}",
                state.num_clients()
            )));
        }
        state.theta.check_dim(self.objective.dim())
    }

    pub fn rho(&self) -> f64 {
        self.solver.rho
    }
}

/// Result of one committed round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub state: ServerState,
    pub plan: RoundPlan,
    /// `θ̄^{t+1}`: uniform mean of the active clients' local outputs.
    pub aggregate: ParamVector,
    /// Per active client, in plan order.
    pub inexactness: Vec<f64>,
}

impl RoundOutcome {
    pub fn mean_inexactness(&self) -> f64 {
        self.inexactness.iter().sum::<f64>() / self.inexactness.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LocalMode {
    Primal,
    PrimalDual,
}

/// Runs the active clients' local solves (in parallel) and returns them in plan order.
fn local_solves(
    ctx: &RoundContext<'_>,
    state: &ServerState,
    plan: &RoundPlan,
    mode: LocalMode,
    sam: bool,
) -> Result<Vec<LocalResult>> {
    ctx.check(state)?;
    let zero = ParamVector::zeros(state.dim());
    let cfg = match mode {
        LocalMode::Primal => ctx.solver.without_penalty(),
        LocalMode::PrimalDual => ctx.solver.clone(),
    };
    let t = state.round;
    let results: Vec<Result<LocalResult>> = plan
        .active()
        .par_iter()
        .map(|&i| {
            let dual = match mode {
                LocalMode::Primal => &zero,
                LocalMode::PrimalDual => &state.duals[i],
            };
            let problem = LocalProblem {
                objective: ctx.objective,
                shard: &ctx.dataset.shards[i],
                dual,
                anchor: &state.theta,
            };
            let mut rng = RngStream::keyed(ctx.master_seed, Purpose::Minibatch, i as u64, t as u64);
            let out = if sam {
                sam_local_train(problem, &cfg, t, &mut rng)
            } else {
                sgd_local_train(problem, &cfg, t, &mut rng)
            };
            out.map_err(|e| FedError::ClientDivergence {
                client: i,
                round: t,
                source: Box::new(e),
            })
        })
        .collect();
    results.into_iter().collect()
}

/// `D-Update`: active clients move by their own local drift, inactive
/// clients by the aggregate drift.
pub fn d_update(
    dual: &ParamVector,
    theta: &ParamVector,
    local: Option<&ParamVector>,
    aggregate: &ParamVector,
    rho: f64,
) -> Result<ParamVector> {
    let target = local.unwrap_or(aggregate);
    dual.add_scaled(rho, &target.sub(theta)?)
}

fn aggregate_of(results: &[LocalResult], d: usize) -> Result<ParamVector> {
    mean(results.iter().map(|r| &r.theta), d)
}

fn base_next(state: &ServerState) -> ServerState {
    ServerState {
        theta_prev: state.theta.clone(),
        round: state.round + 1,
        ..state.clone()
    }
}

fn primal_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>, sam: bool) -> Result<RoundOutcome> {
    let results = local_solves(ctx, state, plan, LocalMode::Primal, sam)?;
    let aggregate = aggregate_of(&results, state.dim())?;
    let mut next = base_next(state);
    next.theta = aggregate.clone();
    // no local model survives a primal round except this round's outputs
    next.locals = vec![None; state.num_clients()];
    for (&i, r) in plan.active().iter().zip(&results) {
        next.locals[i] = Some(r.theta.clone());
    }
    // duals are identically zero and therefore never stale
    next.last_dual_update = vec![next.round; state.num_clients()];
    Ok(RoundOutcome {
        state: next,
        plan: plan.clone(),
        aggregate,
        inexactness: results.iter().map(|r| r.inexactness).collect(),
    })
}

/// FedAvg: plain local SGD, uniform model average.
pub fn fedavg_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>) -> Result<RoundOutcome> {
    primal_round(state, plan, ctx, false)
}

/// FedSAM: FedAvg with SAM local steps.
pub fn fedsam_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>) -> Result<RoundOutcome> {
    primal_round(state, plan, ctx, true)
}

/// Local solves plus the standard dual ascent for the active clients.
fn active_dual_step(
    state: &ServerState,
    plan: &RoundPlan,
    ctx: &RoundContext<'_>,
) -> Result<(ServerState, Vec<LocalResult>)> {
    let results = local_solves(ctx, state, plan, LocalMode::PrimalDual, false)?;
    let mut next = base_next(state);
    for (&i, r) in plan.active().iter().zip(&results) {
        next.duals[i] = d_update(&state.duals[i], &state.theta, Some(&r.theta), &r.theta, ctx.rho())?;
        next.locals[i] = Some(r.theta.clone());
        next.last_dual_update[i] = next.round;
    }
    Ok((next, results))
}

/// `(1/|S|)·Σ_{i∈S} (θ_i + λ_i/ρ)` over the active clients.
fn primal_dual_average(next: &ServerState, plan: &RoundPlan, results: &[LocalResult], rho: f64) -> Result<ParamVector> {
    let shifted = plan
        .active()
        .iter()
        .zip(results)
        .map(|(&i, r)| r.theta.add_scaled(1.0 / rho, &next.duals[i]))
        .collect::<Result<Vec<_>>>()?;
    mean(shifted.iter(), next.dim())
}

/// FedPD: every client solves, duals ascend, `θ = (1/C)Σ(θ_i + λ_i/ρ)`.
pub fn fedpd_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>) -> Result<RoundOutcome> {
    if plan.len() != state.num_clients() {
        return Err(FedError::config(
            "participating",
            format!(
                "fedpd requires full participation, got P={} of C={}",
                plan.len(),
                state.num_clients()
            ),
        ));
    }
    let (mut next, results) = active_dual_step(state, plan, ctx)?;
    next.theta = primal_dual_average(&next, plan, &results, ctx.rho())?;
    Ok(RoundOutcome {
        aggregate: aggregate_of(&results, state.dim())?,
        inexactness: results.iter().map(|r| r.inexactness).collect(),
        state: next,
        plan: plan.clone(),
    })
}

/// FedADMM without a composite term: the proximal step is the identity, so
/// `θ = (1/P)Σ_{i∈P}(θ_i + λ_i/ρ)`. Inactive duals stay stale.
pub fn fedadmm_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>) -> Result<RoundOutcome> {
    let (mut next, results) = active_dual_step(state, plan, ctx)?;
    next.theta = primal_dual_average(&next, plan, &results, ctx.rho())?;
    Ok(RoundOutcome {
        aggregate: aggregate_of(&results, state.dim())?,
        inexactness: results.iter().map(|r| r.inexactness).collect(),
        state: next,
        plan: plan.clone(),
    })
}

/// FedDyn: global dual `λ ← λ + ρ(1/C)Σ_{i∈P}(θ_i − θ)`, model
/// `θ = θ̄ + λ_used/ρ` where `λ_used` is the pre-update dual unless
/// `feddyn_use_next_dual` is set.
pub fn feddyn_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>) -> Result<RoundOutcome> {
    let (mut next, results) = active_dual_step(state, plan, ctx)?;
    let rho = ctx.rho();
    let d = state.dim();
    let c = state.num_clients() as f64;
    let mut drift_sum = ParamVector::zeros(d);
    for r in &results {
        drift_sum = drift_sum.add_scaled(1.0, &r.theta.sub(&state.theta)?)?;
    }
    next.global_dual = state.global_dual.add_scaled(rho / c, &drift_sum)?;
    let aggregate = aggregate_of(&results, d)?;
    let used = if ctx.feddyn_use_next_dual {
        &next.global_dual
    } else {
        &state.global_dual
    };
    next.theta = aggregate.add_scaled(1.0 / rho, used)?;
    Ok(RoundOutcome {
        inexactness: results.iter().map(|r| r.inexactness).collect(),
        aggregate,
        state: next,
        plan: plan.clone(),
    })
}

fn aligned_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>, sam: bool) -> Result<RoundOutcome> {
    let results = local_solves(ctx, state, plan, LocalMode::PrimalDual, sam)?;
    let rho = ctx.rho();
    let aggregate = aggregate_of(&results, state.dim())?;
    let mut next = base_next(state);

    let mut local_of: Vec<Option<&ParamVector>> = vec![None; state.num_clients()];
    for (&i, r) in plan.active().iter().zip(&results) {
        local_of[i] = Some(&r.theta);
        next.locals[i] = Some(r.theta.clone());
    }
    for (i, local) in local_of.iter().enumerate() {
        next.duals[i] = d_update(&state.duals[i], &state.theta, *local, &aggregate, rho)?;
    }
    next.last_dual_update = vec![next.round; state.num_clients()];
    let mean_dual = next.mean_dual()?;
    next.theta = aggregate.add_scaled(1.0 / rho, &mean_dual)?;
    Ok(RoundOutcome {
        inexactness: results.iter().map(|r| r.inexactness).collect(),
        aggregate,
        state: next,
        plan: plan.clone(),
    })
}

/// A-FedPD: active duals ascend on their own drift, inactive duals receive
/// the virtual update from the aggregate, then `θ = θ̄ + λ̄/ρ`.
pub fn afedpd_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>) -> Result<RoundOutcome> {
    aligned_round(state, plan, ctx, false)
}

/// A-FedPD with SAM local steps.
pub fn afedpdsam_round(state: &ServerState, plan: &RoundPlan, ctx: &RoundContext<'_>) -> Result<RoundOutcome> {
    aligned_round(state, plan, ctx, true)
}

/// Dispatches one round of `kind`.
pub fn run_round(
    kind: AlgorithmKind,
    state: &ServerState,
    plan: &RoundPlan,
    ctx: &RoundContext<'_>,
) -> Result<RoundOutcome> {
    match kind {
        AlgorithmKind::FedAvg => fedavg_round(state, plan, ctx),
        AlgorithmKind::FedSam => fedsam_round(state, plan, ctx),
        AlgorithmKind::FedPd => fedpd_round(state, plan, ctx),
        AlgorithmKind::FedAdmm => fedadmm_round(state, plan, ctx),
        AlgorithmKind::FedDyn => feddyn_round(state, plan, ctx),
        AlgorithmKind::AFedPd => afedpd_round(state, plan, ctx),
        AlgorithmKind::AFedPdSam => afedpdsam_round(state, plan, ctx),
    }
}

/// Active set for round `round`, from its own keyed stream.
pub fn plan_round(master_seed: u64, round: usize, clients: usize, participating: usize) -> Result<RoundPlan> {
    let mut rng = RngStream::keyed(master_seed, Purpose::ClientSampling, 0, round as u64);
    sample_clients(&mut rng, clients, participating)
}
