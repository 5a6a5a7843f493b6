//! Synthetic data pools and label-skewed partitioning across clients.
//!
//! Each client draws its own class-proportion vector from a symmetric
//! Dirichlet, then fills its shard by sampling a label from those
//! proportions and a pool sample of that label, by default with
//! replacement (one sample may live on several clients).

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{FedError, Result};
use crate::objectives::{DataSample, Shard};
use crate::veckit::{gaussian_vector, ParamVector, RngStream};

/// Dirichlet concentration; `Iid` stands for α = ∞ (uniform proportions).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Concentration {
    Dirichlet(f64),
    Iid,
}

impl Concentration {
    /// `f64::INFINITY` maps to [`Concentration::Iid`].
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if alpha == f64::INFINITY {
            Ok(Concentration::Iid)
        } else if alpha > 0.0 && alpha.is_finite() {
            Ok(Concentration::Dirichlet(alpha))
        } else {
            Err(FedError::param(format!("concentration must be > 0, got {alpha}")))
        }
    }

    pub fn alpha(self) -> f64 {
        match self {
            Concentration::Dirichlet(a) => a,
            Concentration::Iid => f64::INFINITY,
        }
    }
}

/// Labeled samples grouped by class, plus the generating class means.
#[derive(Debug, Clone)]
pub struct SamplePool {
    samples: Vec<DataSample>,
    by_class: Vec<Vec<usize>>,
    class_means: Vec<ParamVector>,
    spread: f64,
}

impl SamplePool {
    pub fn samples(&self) -> &[DataSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.class_means[0].len()
    }

    pub fn class_means(&self) -> &[ParamVector] {
        &self.class_means
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    /// New samples from the same class-conditional Gaussians, `per_class` each.
    pub fn fresh_samples(&self, rng: &mut RngStream, per_class: usize) -> Result<Vec<DataSample>> {
        draw_around_means(rng, &self.class_means, per_class, self.spread)
    }
}

fn draw_around_means(rng: &mut RngStream, means: &[ParamVector], per_class: usize, spread: f64) -> Result<Vec<DataSample>> {
    let m = means[0].len();
    let mut out = Vec::with_capacity(means.len() * per_class);
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..per_class {
            let noise = gaussian_vector(rng, m, 0.0, spread)?;
            out.push(DataSample::classified(mu.add_scaled(1.0, &noise)?, c));
        }
    }
    Ok(out)
}

/// Isotropic Gaussian classes: class means drawn from N(0, separation²·I),
/// samples from N(mean_c, spread²·I).
pub fn make_gaussian_classes(
    rng: &mut RngStream,
    num_classes: usize,
    m: usize,
    per_class: usize,
    spread: f64,
    separation: f64,
) -> Result<SamplePool> {
    if num_classes < 2 {
        return Err(FedError::param("need at least 2 classes"));
    }
    if per_class == 0 {
        return Err(FedError::param("per_class must be >= 1"));
    }
    if !(spread >= 0.0) {
        return Err(FedError::param(format!("spread must be >= 0, got {spread}")));
    }
    let class_means = (0..num_classes)
        .map(|_| gaussian_vector(rng, m, 0.0, separation))
        .collect::<Result<Vec<_>>>()?;
    let samples = draw_around_means(rng, &class_means, per_class, spread)?;
    let by_class = (0..num_classes)
        .map(|c| (c * per_class..(c + 1) * per_class).collect())
        .collect();
    Ok(SamplePool {
        samples,
        by_class,
        class_means,
        spread,
    })
}

/// Per-client pool indices and the class proportions they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub index_sets: Vec<Vec<usize>>,
    pub proportions: Vec<Vec<f64>>,
}

fn dirichlet_draw(rng: &mut RngStream, k: usize, alpha: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FedError::param(e.to_string()))?;
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        // every gamma draw underflowed: the limit is a one-hot vector
        let hot = rng.random_range(0..k);
        p = (0..k).map(|c| if c == hot { 1.0 } else { 0.0 }).collect();
    }
    Ok(p)
}

/// Splits `pool` across `clients` shards of `samples_per_client` each.
pub fn dirichlet_partition(
    rng: &mut RngStream,
    pool: &SamplePool,
    clients: usize,
    alpha: Concentration,
    with_replacement: bool,
    samples_per_client: usize,
) -> Result<Partition> {
    if clients == 0 {
        return Err(FedError::param("need at least one client"));
    }
    if samples_per_client == 0 {
        return Err(FedError::param("samples_per_client must be >= 1"));
    }
    let k = pool.num_classes();
    let mut remaining: Vec<Vec<usize>> = pool.by_class.clone();
    if !with_replacement {
        for list in remaining.iter_mut() {
            list.shuffle(rng);
        }
    }

    let mut index_sets = Vec::with_capacity(clients);
    let mut proportions = Vec::with_capacity(clients);
    for _ in 0..clients {
        let p = match alpha {
            Concentration::Iid => vec![1.0 / k as f64; k],
            Concentration::Dirichlet(a) => dirichlet_draw(rng, k, a)?,
        };
        let label_dist = WeightedIndex::new(&p).map_err(|e| FedError::param(e.to_string()))?;
        let mut picks = Vec::with_capacity(samples_per_client);
        for _ in 0..samples_per_client {
            let class = label_dist.sample(rng);
            let idx = if with_replacement {
                let members = &pool.by_class[class];
                members[rng.random_range(0..members.len())]
            } else {
                remaining[class].pop().ok_or(FedError::Partition {
                    class,
                    available: 0,
                })?
            };
            picks.push(idx);
        }
        index_sets.push(picks);
        proportions.push(p);
    }
    Ok(Partition {
        index_sets,
        proportions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub alpha: Concentration,
    pub with_replacement: bool,
}

/// Client shards plus a held-out test set that is never partitioned.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub shards: Vec<Shard>,
    pub test_set: Option<Shard>,
    pub meta: DatasetMeta,
    pub index_sets: Option<Vec<Vec<usize>>>,
}

impl FederatedDataset {
    pub fn from_partition(
        pool: &SamplePool,
        partition: &Partition,
        test_set: Option<Shard>,
        alpha: Concentration,
        with_replacement: bool,
    ) -> Result<Self> {
        let shards = partition
            .index_sets
            .iter()
            .map(|idx| Shard::new(idx.iter().map(|&i| pool.samples[i].clone()).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shards,
            test_set,
            meta: DatasetMeta {
                num_classes: pool.num_classes(),
                feature_dim: pool.feature_dim(),
                alpha,
                with_replacement,
            },
            index_sets: Some(partition.index_sets.clone()),
        })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn total_samples(&self) -> usize {
        self.shards.iter().map(Shard::len).sum()
    }

    pub fn label_histograms(&self) -> Vec<Vec<usize>> {
        self.shards
            .iter()
            .map(|s| s.class_histogram(self.meta.num_classes))
            .collect()
    }

    /// Mean total-variation distance between each shard's label
    /// distribution and `reference` (a probability vector).
    pub fn mean_tv_distance(&self, reference: &[f64]) -> f64 {
        let hists = self.label_histograms();
        let total: f64 = hists
            .iter()
            .map(|h| {
                let n = h.iter().sum::<usize>().max(1) as f64;
                0.5 * h
                    .iter()
                    .zip(reference)
                    .map(|(&c, r)| (c as f64 / n - r).abs())
                    .sum::<f64>()
            })
            .sum();
        total / hists.len() as f64
    }

    /// Mean over shards of `ln K − H(shard label distribution)`.
    pub fn mean_entropy_gap(&self) -> f64 {
        let k = self.meta.num_classes as f64;
        let hists = self.label_histograms();
        let total: f64 = hists
            .iter()
            .map(|h| {
                let n = h.iter().sum::<usize>().max(1) as f64;
                let entropy: f64 = h
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / n;
                        -p * p.ln()
                    })
                    .sum();
                k.ln() - entropy
            })
            .sum();
        total / hists.len() as f64
    }

    /// Writes `client_id,class,count` rows for heterogeneity audits.
    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| FedError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["client_id", "class", "count"]).map_err(csv_err)?;
        for (client, hist) in self.label_histograms().iter().enumerate() {
            for (class, count) in hist.iter().enumerate() {
                w.write_record([client.to_string(), class.to_string(), count.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|source| FedError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Least-squares federation: client `i` holds noisy copies of its own
/// center `a_i ~ N(0, target_scale²·I)`, samples `a_i + N(0, noise²·I)`.
pub fn make_quadratic_federation(
    rng: &mut RngStream,
    clients: usize,
    d: usize,
    samples_per_client: usize,
    target_scale: f64,
    noise: f64,
) -> Result<FederatedDataset> {
    if clients == 0 || samples_per_client == 0 {
        return Err(FedError::param("need >= 1 client and >= 1 sample per client"));
    }
    let mut shards = Vec::with_capacity(clients);
    for _ in 0..clients {
        let center = gaussian_vector(rng, d, 0.0, target_scale)?;
        let samples = (0..samples_per_client)
            .map(|_| Ok(DataSample::point(center.add_scaled(1.0, &gaussian_vector(rng, d, 0.0, noise)?)?)))
            .collect::<Result<Vec<_>>>()?;
        shards.push(Shard::new(samples)?);
    }
    Ok(FederatedDataset {
        shards,
        test_set: None,
        meta: DatasetMeta {
            num_classes: 0,
            feature_dim: d,
            alpha: Concentration::Iid,
            with_replacement: true,
        },
        index_sets: None,
    })
}

/// Minimizer of `(1/C)·Σ_i f_i` for identity least squares with weight decay `l2`:
/// the uniform mean of per-client sample means, shrunk by `1/(1+l2)`.
pub fn quadratic_optimum(dataset: &FederatedDataset, l2: f64) -> Result<ParamVector> {
    let d = dataset.meta.feature_dim;
    let client_means = dataset
        .shards
        .iter()
        .map(|s| crate::veckit::mean(s.samples().iter().map(|x| &x.features), d))
        .collect::<Result<Vec<_>>>()?;
    crate::veckit::mean(client_means.iter(), d)?.scale(1.0 / (1.0 + l2))
}
