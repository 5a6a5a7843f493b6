//! Flat TOML run configuration.
//!
//! Every key except `algorithm` has a default. Unknown keys are rejected.
//!
//! ```toml
//! algorithm = "afedpd"      # fedavg | fedsam | fedpd | fedadmm | feddyn | afedpd | afedpdsam
//! clients = 50
//! participating = 5
//! rounds = 300
//! local_steps = 20
//! objective = "logistic"    # quadratic | logistic | mlp
//! alpha = 0.1               # Dirichlet concentration, `inf` for IID
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    dirichlet_partition, make_gaussian_classes, make_quadratic_federation, Concentration, FederatedDataset,
};
use crate::error::{FedError, Result};
use crate::federation::AlgorithmKind;
use crate::local_solvers::SolverConfig;
use crate::objectives::{Objective, Shard};
use crate::veckit::{ParamVector, Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveChoice {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: AlgorithmKind,

    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::participating")]
    pub participating: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::local_steps")]
    pub local_steps: usize,

    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::sam_radius")]
    pub sam_radius: f64,
    #[serde(default = "defaults::sam_eps")]
    pub sam_eps: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub feddyn_use_next_dual: bool,

    #[serde(default = "defaults::objective")]
    pub objective: ObjectiveChoice,
    /// MLP hidden width.
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,

    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::per_class")]
    pub per_class: usize,
    /// Within-class (or within-client, for the quadratic objective) noise.
    #[serde(default = "defaults::spread")]
    pub spread: f64,
    /// Scale of the class means.
    #[serde(default = "defaults::class_sep")]
    pub class_sep: f64,
    /// Scale of the per-client centers of the quadratic objective.
    #[serde(default = "defaults::target_scale")]
    pub target_scale: f64,
    #[serde(default = "defaults::with_replacement")]
    pub with_replacement: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_client: Option<usize>,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,

    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "defaults::run_id")]
    pub run_id: String,
    #[serde(default)]
    pub target_accuracies: Vec<f64>,
    /// A completed run whose final `grad_norm_sq` is at most this counts as converged.
    #[serde(default = "defaults::converge_tol")]
    pub converge_tol: f64,
}

mod defaults {
    use super::ObjectiveChoice;

    pub fn clients() -> usize {
        50
    }
    pub fn participating() -> usize {
        5
    }
    pub fn rounds() -> usize {
        300
    }
    pub fn local_steps() -> usize {
        20
    }
    pub fn rho() -> f64 {
        0.1
    }
    pub fn lr() -> f64 {
        0.1
    }
    pub fn lr_decay() -> f64 {
        0.998
    }
    pub fn weight_decay() -> f64 {
        0.001
    }
    pub fn sam_radius() -> f64 {
        0.05
    }
    pub fn sam_eps() -> f64 {
        1e-2
    }
    pub fn batch_size() -> usize {
        50
    }
    pub fn objective() -> ObjectiveChoice {
        ObjectiveChoice::Logistic
    }
    pub fn hidden() -> usize {
        16
    }
    pub fn num_classes() -> usize {
        4
    }
    pub fn feature_dim() -> usize {
        10
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn per_class() -> usize {
        250
    }
    pub fn spread() -> f64 {
        1.0
    }
    pub fn class_sep() -> f64 {
        1.0
    }
    pub fn target_scale() -> f64 {
        1.0
    }
    pub fn with_replacement() -> bool {
        true
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn run_id() -> String {
        "run".into()
    }
    pub fn converge_tol() -> f64 {
        1e-8
    }
}

impl RunConfig {
    /// Defaults for every optional key.
    pub fn with_algorithm(algorithm: AlgorithmKind) -> Self {
        Self {
            algorithm,
            clients: defaults::clients(),
            participating: defaults::participating(),
            rounds: defaults::rounds(),
            local_steps: defaults::local_steps(),
            rho: defaults::rho(),
            lr: defaults::lr(),
            lr_decay: defaults::lr_decay(),
            weight_decay: defaults::weight_decay(),
            sam_radius: defaults::sam_radius(),
            sam_eps: defaults::sam_eps(),
            batch_size: defaults::batch_size(),
            grad_clip: None,
            feddyn_use_next_dual: false,
            objective: defaults::objective(),
            hidden: defaults::hidden(),
            num_classes: defaults::num_classes(),
            feature_dim: defaults::feature_dim(),
            alpha: defaults::alpha(),
            per_class: defaults::per_class(),
            spread: defaults::spread(),
            class_sep: defaults::class_sep(),
            target_scale: defaults::target_scale(),
            with_replacement: defaults::with_replacement(),
            samples_per_client: None,
            test_per_class: defaults::test_per_class(),
            master_seed: 0,
            seeds: Vec::new(),
            output_dir: None,
            run_id: defaults::run_id(),
            target_accuracies: Vec::new(),
            converge_tol: defaults::converge_tol(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(FedError::config(key, msg));
        if self.clients == 0 {
            return bad("clients", "C must be >= 1".into());
        }
        if self.participating == 0 || self.participating > self.clients {
            return bad(
                "participating",
                format!(
                    "P={} must satisfy 1 <= P <= C (clients={})",
                    self.participating, self.clients
                ),
            );
        }
        if self.algorithm.requires_full_participation() && self.participating != self.clients {
            return bad(
                "participating",
                format!(
                    "{} requires full participation, got P={} of C={}",
                    self.algorithm, self.participating, self.clients
                ),
            );
        }
        if self.rounds == 0 {
            return bad("rounds", "T must be >= 1".into());
        }
        if let Err(FedError::Parameter(msg)) = self.solver_config().validate() {
            let key = msg.split_whitespace().next().unwrap_or("solver").to_string();
            return Err(FedError::config(key, msg));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be >= 1".into());
        }
        if !(self.spread >= 0.0) {
            return bad("spread", format!("must be >= 0, got {}", self.spread));
        }
        if !(self.class_sep >= 0.0) || !(self.target_scale >= 0.0) {
            return bad("class_sep", "scales must be >= 0".into());
        }
        if let Err(e) = Concentration::from_alpha(self.alpha) {
            return bad("alpha", e.to_string());
        }
        if self.samples_per_client == Some(0) {
            return bad("samples_per_client", "must be >= 1".into());
        }
        match self.objective {
            ObjectiveChoice::Quadratic => {}
            ObjectiveChoice::Logistic | ObjectiveChoice::Mlp => {
                if self.num_classes < 2 {
                    return bad("num_classes", "classification needs >= 2 classes".into());
                }
                if self.per_class == 0 {
                    return bad("per_class", "must be >= 1".into());
                }
                if self.test_per_class == 0 {
                    return bad("test_per_class", "must be >= 1".into());
                }
                if self.objective == ObjectiveChoice::Mlp && self.hidden == 0 {
                    return bad("hidden", "must be >= 1".into());
                }
                if self.samples_per_client.is_none() && self.per_class * self.num_classes < self.clients {
                    return bad("per_class", "pool smaller than the number of clients".into());
                }
            }
        }
        if let Some(t) = self.target_accuracies.iter().find(|t| !t.is_finite()) {
            return bad("target_accuracies", format!("non-finite target {t}"));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad("run_id", format!("`{}` is not a valid file stem", self.run_id));
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            local_steps: self.local_steps,
            lr: self.lr,
            lr_decay: self.lr_decay,
            batch_size: self.batch_size,
            rho: self.rho,
            sam_radius: self.sam_radius,
            sam_eps: self.sam_eps,
            grad_clip: self.grad_clip,
        }
    }

    pub fn build_objective(&self) -> Result<Objective> {
        match self.objective {
            ObjectiveChoice::Quadratic => Objective::quadratic(self.feature_dim, self.weight_decay),
            ObjectiveChoice::Logistic => Objective::logistic(self.feature_dim, self.num_classes, self.weight_decay),
            ObjectiveChoice::Mlp => Objective::mlp(self.feature_dim, self.hidden, self.num_classes, self.weight_decay),
        }
    }

    /// Shard size; defaults to an even split of the pool (20 for the quadratic objective).
    pub fn effective_samples_per_client(&self) -> usize {
        self.samples_per_client.unwrap_or(match self.objective {
            ObjectiveChoice::Quadratic => 20,
            _ => (self.per_class * self.num_classes / self.clients).max(1),
        })
    }

    /// Seeds to replicate over; `[master_seed]` when none are listed.
    pub fn replication_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.master_seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn build_dataset(&self, seed: u64) -> Result<FederatedDataset> {
        let spc = self.effective_samples_per_client();
        match self.objective {
            ObjectiveChoice::Quadratic => {
                let mut rng = RngStream::keyed(seed, Purpose::DataPool, 0, 0);
                make_quadratic_federation(&mut rng, self.clients, self.feature_dim, spc, self.target_scale, self.spread)
            }
            ObjectiveChoice::Logistic | ObjectiveChoice::Mlp => {
                let alpha = Concentration::from_alpha(self.alpha)?;
                let pool = make_gaussian_classes(
                    &mut RngStream::keyed(seed, Purpose::DataPool, 0, 0),
                    self.num_classes,
                    self.feature_dim,
                    self.per_class,
                    self.spread,
                    self.class_sep,
                )?;
                let partition = dirichlet_partition(
                    &mut RngStream::keyed(seed, Purpose::Partition, 0, 0),
                    &pool,
                    self.clients,
                    alpha,
                    self.with_replacement,
                    spc,
                )?;
                let test = pool.fresh_samples(&mut RngStream::keyed(seed, Purpose::TestSet, 0, 0), self.test_per_class)?;
                FederatedDataset::from_partition(&pool, &partition, Some(Shard::new(test)?), alpha, self.with_replacement)
            }
        }
    }

    pub fn initial_params(&self, objective: &Objective, seed: u64) -> Result<ParamVector> {
        objective.initial_params(&mut RngStream::keyed(seed, Purpose::Init, 0, 0))
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let missing = msg.starts_with("missing field").then(|| field_in_message(&msg)).flatten();
        let key = missing
            .or_else(|| e.span().and_then(|span| key_at(text, span.start)))
            .or_else(|| field_in_message(&msg))
            .unwrap_or_else(|| "<document>".into());
        FedError::config(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Key on the `key = value` line containing byte `pos`.
fn key_at(text: &str, pos: usize) -> Option<String> {
    let start = text[..pos.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    let bare = !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    bare.then(|| key.to_string())
}

/// Extracts the first back-quoted name from a deserializer message.
fn field_in_message(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}
