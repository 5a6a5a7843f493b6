//! Loss families for local empirical risk: least squares, multinomial
//! logistic regression and a one-hidden-layer tanh MLP.
//!
//! Every loss is the batch mean of per-sample losses plus
//! `(l2_coeff / 2)·‖θ‖²`. The reported train loss is this plain objective;
//! proximal and dual terms of the local subproblem are never included.

use crate::error::{FedError, Result};
use crate::veckit::{dot_slices, gaussian_vector, ParamVector, RngStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Target(f64),
    /// Identity least squares uses the features themselves as the target.
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub features: ParamVector,
    pub label: Label,
}

impl DataSample {
    pub fn classified(features: ParamVector, class: usize) -> Self {
        Self {
            features,
            label: Label::Class(class),
        }
    }

    pub fn regression(features: ParamVector, target: f64) -> Self {
        Self {
            features,
            label: Label::Target(target),
        }
    }

    /// Sample for identity least squares: the loss is `½‖θ − point‖²`.
    pub fn point(point: ParamVector) -> Self {
        Self {
            features: point,
            label: Label::Unlabeled,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            _ => None,
        }
    }
}

/// One client's local data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    samples: Vec<DataSample>,
}

impl Shard {
    pub fn new(samples: Vec<DataSample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(FedError::param("a shard needs at least one sample"));
        };
        let m = first.features.len();
        if let Some(bad) = samples.iter().find(|s| s.features.len() != m) {
            return Err(FedError::Dimension {
                expected: m,
                found: bad.features.len(),
            });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[DataSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].features.len()
    }

    /// Label histogram over `num_classes` classes; unlabeled samples are skipped.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for c in self.samples.iter().filter_map(DataSample::class) {
            if c < num_classes {
                h[c] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadraticMode {
    /// `½‖θ − x‖²`, target point stored in the features.
    Identity,
    /// `½(⟨x, θ⟩ − y)²`.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Quadratic(QuadraticMode),
    Logistic,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    kind: ObjectiveKind,
    feature_dim: usize,
    num_classes: usize,
    l2_coeff: f64,
}

impl Objective {
    pub fn new(kind: ObjectiveKind, feature_dim: usize, num_classes: usize, l2_coeff: f64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(FedError::param("feature dimension must be >= 1"));
        }
        if !(l2_coeff >= 0.0) || !l2_coeff.is_finite() {
            return Err(FedError::param(format!("l2_coeff must be >= 0, got {l2_coeff}")));
        }
        match kind {
            ObjectiveKind::Logistic | ObjectiveKind::Mlp { .. } if num_classes < 2 => {
                return Err(FedError::param("classification needs num_classes >= 2"));
            }
            ObjectiveKind::Mlp { hidden: 0 } => {
                return Err(FedError::param("mlp hidden width must be >= 1"));
            }
            _ => {}
        }
        Ok(Self {
            kind,
            feature_dim,
            num_classes,
            l2_coeff,
        })
    }

    pub fn quadratic(feature_dim: usize, l2_coeff: f64) -> Result<Self> {
        Self::new(
            ObjectiveKind::Quadratic(QuadraticMode::Identity),
            feature_dim,
            0,
            l2_coeff,
        )
    }

    pub fn logistic(feature_dim: usize, num_classes: usize, l2_coeff: f64) -> Result<Self> {
        Self::new(ObjectiveKind::Logistic, feature_dim, num_classes, l2_coeff)
    }

    pub fn mlp(feature_dim: usize, hidden: usize, num_classes: usize, l2_coeff: f64) -> Result<Self> {
        Self::new(ObjectiveKind::Mlp { hidden }, feature_dim, num_classes, l2_coeff)
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn l2_coeff(&self) -> f64 {
        self.l2_coeff
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, ObjectiveKind::Quadratic(_))
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        let (m, k) = (self.feature_dim, self.num_classes);
        match self.kind {
            ObjectiveKind::Quadratic(_) => m,
            ObjectiveKind::Logistic => k * (m + 1),
            ObjectiveKind::Mlp { hidden } => hidden * (m + 1) + k * (hidden + 1),
        }
    }

    /// Starting point: zeros, except the MLP which needs symmetry breaking.
    pub fn initial_params(&self, rng: &mut RngStream) -> Result<ParamVector> {
        match self.kind {
            ObjectiveKind::Mlp { hidden } => {
                let m = self.feature_dim;
                let mut theta = vec![0.0; self.dim()];
                let w1 = gaussian_vector(rng, hidden * m, 0.0, 1.0 / (m as f64).sqrt())?;
                theta[..hidden * m].copy_from_slice(w1.as_slice());
                let off = hidden * (m + 1);
                let w2 = gaussian_vector(rng, self.num_classes * hidden, 0.0, 1.0 / (hidden as f64).sqrt())?;
                theta[off..off + self.num_classes * hidden].copy_from_slice(w2.as_slice());
                ParamVector::new(theta)
            }
            _ => Ok(ParamVector::zeros(self.dim())),
        }
    }

    fn check_sample(&self, s: &DataSample) -> Result<()> {
        s.features.check_dim(self.feature_dim)?;
        match (self.kind, s.label) {
            (ObjectiveKind::Quadratic(QuadraticMode::Identity), _) => Ok(()),
            (ObjectiveKind::Quadratic(QuadraticMode::Regression), Label::Target(_)) => Ok(()),
            (ObjectiveKind::Quadratic(QuadraticMode::Regression), _) => {
                Err(FedError::param("regression samples need a real target"))
            }
            (_, Label::Class(c)) if c < self.num_classes => Ok(()),
            (_, label) => Err(FedError::param(format!(
                "label {label:?} outside 0..{}",
                self.num_classes
            ))),
        }
    }

    /// Adds the per-sample gradient into `grad` (when given) and returns the sample loss.
    fn sample_term(&self, theta: &[f64], s: &DataSample, grad: Option<&mut [f64]>) -> f64 {
        let x = s.features.as_slice();
        match self.kind {
            ObjectiveKind::Quadratic(QuadraticMode::Identity) => {
                let mut loss = 0.0;
                match grad {
                    Some(g) => {
                        for ((gj, tj), xj) in g.iter_mut().zip(theta).zip(x) {
                            let r = tj - xj;
                            loss += r * r;
                            *gj += r;
                        }
                    }
                    None => {
                        for (tj, xj) in theta.iter().zip(x) {
                            let r = tj - xj;
                            loss += r * r;
                        }
                    }
                }
                0.5 * loss
            }
            ObjectiveKind::Quadratic(QuadraticMode::Regression) => {
                let Label::Target(y) = s.label else { unreachable!("checked") };
                let r = dot_slices(theta, x) - y;
                if let Some(g) = grad {
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += r * xj;
                    }
                }
                0.5 * r * r
            }
            ObjectiveKind::Logistic => {
                let Label::Class(y) = s.label else { unreachable!("checked") };
                let k = self.num_classes;
                let m = self.feature_dim;
                let mut scores = self.linear_scores(theta, x);
                let loss = softmax_in_place(&mut scores, y);
                if let Some(g) = grad {
                    let (gw, gb) = g.split_at_mut(k * m);
                    for c in 0..k {
                        let delta = scores[c] - if c == y { 1.0 } else { 0.0 };
                        for (gj, xj) in gw[c * m..(c + 1) * m].iter_mut().zip(x) {
                            *gj += delta * xj;
                        }
                        gb[c] += delta;
                    }
                }
                loss
            }
            ObjectiveKind::Mlp { hidden } => {
                let Label::Class(y) = s.label else { unreachable!("checked") };
                self.mlp_term(theta, x, y, hidden, grad)
            }
        }
    }

    fn linear_scores(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let k = self.num_classes;
        let m = self.feature_dim;
        let (w, b) = theta.split_at(k * m);
        (0..k).map(|c| dot_slices(&w[c * m..(c + 1) * m], x) + b[c]).collect()
    }

    fn mlp_hidden(&self, theta: &[f64], x: &[f64], hidden: usize) -> Vec<f64> {
        let m = self.feature_dim;
        let (w1, rest) = theta.split_at(hidden * m);
        let b1 = &rest[..hidden];
        (0..hidden)
            .map(|h| (dot_slices(&w1[h * m..(h + 1) * m], x) + b1[h]).tanh())
            .collect()
    }

    fn mlp_scores(&self, theta: &[f64], act: &[f64], hidden: usize) -> Vec<f64> {
        let off = hidden * (self.feature_dim + 1);
        let k = self.num_classes;
        let (w2, b2) = theta[off..].split_at(k * hidden);
        (0..k)
            .map(|c| dot_slices(&w2[c * hidden..(c + 1) * hidden], act) + b2[c])
            .collect()
    }

    fn mlp_term(&self, theta: &[f64], x: &[f64], y: usize, hidden: usize, grad: Option<&mut [f64]>) -> f64 {
        let m = self.feature_dim;
        let k = self.num_classes;
        let act = self.mlp_hidden(theta, x, hidden);
        let mut probs = self.mlp_scores(theta, &act, hidden);
        let loss = softmax_in_place(&mut probs, y);
        let Some(g) = grad else { return loss };

        let off = hidden * (m + 1);
        let w2 = &theta[off..off + k * hidden];
        let (g1, g2) = g.split_at_mut(off);
        let (gw1, gb1) = g1.split_at_mut(hidden * m);
        let (gw2, gb2) = g2.split_at_mut(k * hidden);

        let mut back = vec![0.0; hidden];
        for c in 0..k {
            let delta = probs[c] - if c == y { 1.0 } else { 0.0 };
            gb2[c] += delta;
            let row = c * hidden..(c + 1) * hidden;
            for ((gj, aj), (bj, wj)) in gw2[row.clone()].iter_mut().zip(&act).zip(back.iter_mut().zip(&w2[row])) {
                *gj += delta * aj;
                *bj += delta * wj;
            }
        }
        for h in 0..hidden {
            let dz = back[h] * (1.0 - act[h] * act[h]);
            gb1[h] += dz;
            for (gj, xj) in gw1[h * m..(h + 1) * m].iter_mut().zip(x) {
                *gj += dz * xj;
            }
        }
        loss
    }

    fn evaluate<'a, I>(&self, theta: &ParamVector, samples: I, want_grad: bool) -> Result<(f64, Option<ParamVector>)>
    where
        I: IntoIterator<Item = &'a DataSample>,
    {
        theta.check_dim(self.dim())?;
        let t = theta.as_slice();
        let mut acc = if want_grad { Some(vec![0.0; t.len()]) } else { None };
        let mut total = 0.0;
        let mut n = 0usize;
        for s in samples {
            self.check_sample(s)?;
            total += self.sample_term(t, s, acc.as_deref_mut());
            n += 1;
        }
        if n == 0 {
            return Err(FedError::param("empty batch"));
        }
        let inv = 1.0 / n as f64;
        let l2 = self.l2_coeff;
        let loss = total * inv + 0.5 * l2 * dot_slices(t, t);
        if !loss.is_finite() {
            return Err(FedError::NonFinite("loss"));
        }
        let grad = match acc {
            Some(acc) => Some(
                ParamVector::new(acc.iter().zip(t).map(|(a, tj)| a * inv + l2 * tj).collect())
                    .map_err(|_| FedError::NonFinite("gradient"))?,
            ),
            None => None,
        };
        Ok((loss, grad))
    }

    /// Mean per-sample loss plus the weight-decay term.
    pub fn loss(&self, theta: &ParamVector, batch: &[DataSample]) -> Result<f64> {
        Ok(self.evaluate(theta, batch, false)?.0)
    }

    pub fn grad(&self, theta: &ParamVector, batch: &[DataSample]) -> Result<ParamVector> {
        Ok(self.evaluate(theta, batch, true)?.1.expect("requested"))
    }

    /// Gradient over the samples of `shard` selected by `indices` (repeats allowed).
    pub fn grad_indexed(&self, theta: &ParamVector, shard: &Shard, indices: &[usize]) -> Result<ParamVector> {
        let samples = shard.samples();
        if let Some(&bad) = indices.iter().find(|&&i| i >= samples.len()) {
            return Err(FedError::param(format!("batch index {bad} outside shard of {}", samples.len())));
        }
        Ok(self
            .evaluate(theta, indices.iter().map(|&i| &samples[i]), true)?
            .1
            .expect("requested"))
    }

    pub fn full_loss(&self, theta: &ParamVector, shard: &Shard) -> Result<f64> {
        self.loss(theta, shard.samples())
    }

    pub fn full_grad(&self, theta: &ParamVector, shard: &Shard) -> Result<ParamVector> {
        self.grad(theta, shard.samples())
    }

    /// Class scores for one feature vector.
    pub fn scores(&self, theta: &ParamVector, features: &ParamVector) -> Result<Vec<f64>> {
        theta.check_dim(self.dim())?;
        features.check_dim(self.feature_dim)?;
        let (t, x) = (theta.as_slice(), features.as_slice());
        match self.kind {
            ObjectiveKind::Logistic => Ok(self.linear_scores(t, x)),
            ObjectiveKind::Mlp { hidden } => Ok(self.mlp_scores(t, &self.mlp_hidden(t, x, hidden), hidden)),
            ObjectiveKind::Quadratic(_) => Err(FedError::Unsupported(
                "class scores are undefined for the quadratic objective".into(),
            )),
        }
    }

    /// Fraction of samples whose argmax score (lowest index on ties) matches the label.
    pub fn predict_accuracy(&self, theta: &ParamVector, shard: &Shard) -> Result<f64> {
        if !self.is_classifier() {
            return Err(FedError::Unsupported(
                "accuracy is undefined for the quadratic objective".into(),
            ));
        }
        let mut correct = 0usize;
        for s in shard.samples() {
            self.check_sample(s)?;
            if Some(argmax(&self.scores(theta, &s.features)?)) == s.class() {
                correct += 1;
            }
        }
        Ok(correct as f64 / shard.len() as f64)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Overwrites `scores` with softmax probabilities and returns `-ln p[label]`.
fn softmax_in_place(scores: &mut [f64], label: usize) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        z += *s;
    }
    let target = scores[label];
    for s in scores.iter_mut() {
        *s /= z;
    }
    z.ln() - target.ln()
}
