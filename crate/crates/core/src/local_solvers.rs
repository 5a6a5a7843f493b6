//! Inexact minimization of the local augmented Lagrangian
//! `f_i(θ) + ⟨λ_i, θ − θ_anchor⟩ + (ρ/2)‖θ − θ_anchor‖²`
//! by K minibatch steps of SGD, or of SAM-SGD.

use rand::Rng;

use crate::error::{FedError, Result};
use crate::objectives::{Objective, Shard};
use crate::veckit::{ParamVector, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub local_steps: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub rho: f64,
    pub sam_radius: f64,
    pub sam_eps: f64,
    /// Clip the minibatch gradient to this norm; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            local_steps: 20,
            lr: 0.1,
            lr_decay: 0.998,
            batch_size: 50,
            rho: 0.1,
            sam_radius: 0.05,
            sam_eps: 1e-2,
            grad_clip: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FedError::param(msg));
        if self.local_steps == 0 {
            return fail("local_steps must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return fail(format!("rho must be > 0, got {}", self.rho));
        }
        if !(self.sam_radius >= 0.0 && self.sam_radius.is_finite()) {
            return fail(format!("sam_radius must be >= 0, got {}", self.sam_radius));
        }
        if !(self.sam_eps > 0.0 && self.sam_eps.is_finite()) {
            return fail(format!("sam_eps must be > 0, got {}", self.sam_eps));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    /// Step size for `round`, held constant within the round.
    pub fn step_size(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round as i32)
    }

    /// Same schedule with the penalty switched off, for the primal baselines.
    pub(crate) fn without_penalty(&self) -> Self {
        Self { rho: 0.0, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub theta: ParamVector,
    /// `‖∇L_i(θ_out)‖²` over the full shard.
    pub inexactness: f64,
    pub steps_taken: usize,
}

/// Per-step instrumentation of a local solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    /// Norm of the gradient actually applied (the perturbed one under SAM).
    pub grad_norm: f64,
    /// Norm of the minibatch gradient at the current iterate.
    pub base_grad_norm: f64,
    pub perturbation_norm: f64,
    /// `‖θ_k − θ_anchor‖` before the step.
    pub offset_norm: f64,
}

/// `g + λ_i + ρ(θ − θ_anchor)`.
pub fn penalized_direction(
    g: &ParamVector,
    dual: &ParamVector,
    theta: &ParamVector,
    anchor: &ParamVector,
    rho: f64,
) -> Result<ParamVector> {
    g.add_scaled(1.0, dual)?.add_scaled(rho, &theta.sub(anchor)?)
}

/// Minibatch gradient of the local augmented Lagrangian.
pub fn lagrangian_grad(
    obj: &Objective,
    theta: &ParamVector,
    dual: &ParamVector,
    anchor: &ParamVector,
    rho: f64,
    batch: &[crate::objectives::DataSample],
) -> Result<ParamVector> {
    let g = obj.grad(theta, batch)?;
    penalized_direction(&g, dual, theta, anchor, rho)
}

/// `‖full-shard Lagrangian gradient‖²` at `theta`.
pub fn inexactness(
    obj: &Objective,
    shard: &Shard,
    theta: &ParamVector,
    dual: &ParamVector,
    anchor: &ParamVector,
    rho: f64,
) -> Result<f64> {
    let g = lagrangian_grad(obj, theta, dual, anchor, rho, shard.samples())?;
    let n = g.norm2();
    Ok(n * n)
}

/// Inputs shared by every local solve of one client in one round.
#[derive(Debug, Clone, Copy)]
pub struct LocalProblem<'a> {
    pub objective: &'a Objective,
    pub shard: &'a Shard,
    pub dual: &'a ParamVector,
    pub anchor: &'a ParamVector,
}

impl LocalProblem<'_> {
    fn check(&self) -> Result<()> {
        let d = self.objective.dim();
        self.dual.check_dim(d)?;
        self.anchor.check_dim(d)
    }
}

fn as_divergence(step: usize) -> impl Fn(FedError) -> FedError {
    move |e| match e {
        FedError::NonFinite(_) => FedError::Divergence { step },
        other => other,
    }
}

fn clip(g: ParamVector, limit: Option<f64>) -> Result<ParamVector> {
    match limit {
        Some(c) => {
            let n = g.norm2();
            if n > c {
                g.scale(c / n)
            } else {
                Ok(g)
            }
        }
        None => Ok(g),
    }
}

fn run_local(
    problem: LocalProblem<'_>,
    start: &ParamVector,
    cfg: &SolverConfig,
    round: usize,
    rng: &mut RngStream,
    sam: bool,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<LocalResult> {
    problem.check()?;
    start.check_dim(problem.objective.dim())?;
    let LocalProblem {
        objective,
        shard,
        dual,
        anchor,
    } = problem;
    let eta = cfg.step_size(round);
    let n = shard.len();
    let mut batch = vec![0usize; cfg.batch_size];
    let mut theta = start.clone();

    for step in 0..cfg.local_steps {
        let diverged = as_divergence(step);
        for slot in batch.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        let mut g = objective.grad_indexed(&theta, shard, &batch).map_err(&diverged)?;
        let base_grad_norm = g.norm2();
        let mut perturbation_norm = 0.0;
        if sam {
            let perturbation = g.scale(cfg.sam_radius / (base_grad_norm + cfg.sam_eps)).map_err(&diverged)?;
            perturbation_norm = perturbation.norm2();
            let probe = theta.add_scaled(1.0, &perturbation).map_err(&diverged)?;
            g = objective.grad_indexed(&probe, shard, &batch).map_err(&diverged)?;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(StepTrace {
                grad_norm: g.norm2(),
                base_grad_norm,
                perturbation_norm,
                offset_norm: theta.distance(anchor)?,
            });
        }
        let g = clip(g, cfg.grad_clip)?;
        let direction = penalized_direction(&g, dual, &theta, anchor, cfg.rho).map_err(&diverged)?;
        theta = theta.add_scaled(-eta, &direction).map_err(&diverged)?;
    }

    let inexact = inexactness(objective, shard, &theta, dual, anchor, cfg.rho)
        .map_err(as_divergence(cfg.local_steps))?;
    Ok(LocalResult {
        theta,
        inexactness: inexact,
        steps_taken: cfg.local_steps,
    })
}

/// K steps of `θ ← θ − η^t(g + λ_i + ρ(θ − θ_anchor))` starting at the anchor.
pub fn sgd_local_train(
    problem: LocalProblem<'_>,
    cfg: &SolverConfig,
    round: usize,
    rng: &mut RngStream,
) -> Result<LocalResult> {
    run_local(problem, problem.anchor, cfg, round, rng, false, None)
}

/// As [`sgd_local_train`] but from an arbitrary starting iterate.
pub fn sgd_local_train_from(
    problem: LocalProblem<'_>,
    start: &ParamVector,
    cfg: &SolverConfig,
    round: usize,
    rng: &mut RngStream,
) -> Result<LocalResult> {
    run_local(problem, start, cfg, round, rng, false, None)
}

/// SAM variant: the gradient is taken at `θ + r·g/(‖g‖ + eps)` on the same minibatch.
pub fn sam_local_train(
    problem: LocalProblem<'_>,
    cfg: &SolverConfig,
    round: usize,
    rng: &mut RngStream,
) -> Result<LocalResult> {
    run_local(problem, problem.anchor, cfg, round, rng, true, None)
}

/// Runs a local solve and records per-step instrumentation.
pub fn local_train_traced(
    problem: LocalProblem<'_>,
    start: &ParamVector,
    cfg: &SolverConfig,
    round: usize,
    rng: &mut RngStream,
    sam: bool,
) -> Result<(LocalResult, Vec<StepTrace>)> {
    let mut trace = Vec::with_capacity(cfg.local_steps);
    let out = run_local(problem, start, cfg, round, rng, sam, Some(&mut trace))?;
    Ok((out, trace))
}
