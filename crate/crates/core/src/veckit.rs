//! Dense parameter vectors and seeded random streams.
//!
//! Every public vector operation checks lengths and rejects non-finite
//! results, so a NaN never travels silently through a simulation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FedError, Result};

/// Flat real vector of model parameters (or duals) of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

impl ParamVector {
    /// Wraps `data`, rejecting NaN/Inf entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FedError::NonFinite("ParamVector::new"));
        }
        Ok(Self { data })
    }

    pub fn zeros(d: usize) -> Self {
        Self { data: vec![0.0; d] }
    }

    pub fn filled(d: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; d])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, j: usize) -> Option<f64> {
        self.data.get(j).copied()
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.data.len() != d {
            return Err(FedError::Dimension {
                expected: d,
                found: self.data.len(),
            });
        }
        Ok(())
    }

    /// `self + a·x`.
    pub fn add_scaled(&self, a: f64, x: &ParamVector) -> Result<ParamVector> {
        axpy(a, x, self)
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> Result<ParamVector> {
        ParamVector::new(self.data.iter().map(|v| a * v).collect())
    }

    pub fn norm2(&self) -> f64 {
        norm2(self)
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        Ok(norm2(&self.sub(other)?))
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        other.check_dim(self.len())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Returns `a·x + y`.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_dim(y.len())?;
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(xi, yi)| a.mul_add(*xi, *yi))
        .collect();
    ParamVector::new(data).map_err(|_| FedError::NonFinite("axpy"))
}

pub fn dot(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    x.check_dim(y.len())?;
    Ok(dot_slices(&x.data, &y.data))
}

pub fn norm2(x: &ParamVector) -> f64 {
    dot_slices(&x.data, &x.data).sqrt()
}

pub(crate) fn dot_slices(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Uniform mean of `vectors`, summed in the given order.
pub fn mean<'a, I>(vectors: I, d: usize) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for v in vectors {
        v.check_dim(d)?;
        for (a, x) in acc.iter_mut().zip(&v.data) {
            *a += x;
        }
        n += 1;
    }
    if n == 0 {
        return Err(FedError::param("mean of an empty collection"));
    }
    let inv = 1.0 / n as f64;
    ParamVector::new(acc.into_iter().map(|a| a * inv).collect())
        .map_err(|_| FedError::NonFinite("mean"))
}

/// What a random stream is used for; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    ClientSampling,
    Minibatch,
    DataPool,
    Partition,
    TestSet,
    Init,
    Custom(u64),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::ClientSampling => 1,
            Purpose::Minibatch => 2,
            Purpose::DataPool => 3,
            Purpose::Partition => 4,
            Purpose::TestSet => 5,
            Purpose::Init => 6,
            Purpose::Custom(t) => 0x1000 + t,
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream keyed by `(seed, stream_id)`.
///
/// ChaCha supports 2^64 independent streams per key, so every
/// `(client, round, purpose)` triple gets its own stream and per-client
/// work can run in any order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream dedicated to one `(purpose, client, round)` task under `master_seed`.
    pub fn keyed(master_seed: u64, purpose: Purpose, client: u64, round: u64) -> Self {
        let id = mix64(mix64(mix64(purpose.tag()) ^ client) ^ round);
        Self::new(master_seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `d` independent N(mean, stddev²) draws.
pub fn gaussian_vector(rng: &mut RngStream, d: usize, mean: f64, stddev: f64) -> Result<ParamVector> {
    if !(stddev >= 0.0) || !stddev.is_finite() {
        return Err(FedError::param(format!("stddev must be >= 0, got {stddev}")));
    }
    if d == 0 {
        return Err(FedError::param("gaussian_vector needs d >= 1"));
    }
    let normal = Normal::new(mean, stddev).map_err(|e| FedError::param(e.to_string()))?;
    ParamVector::new((0..d).map(|_| normal.sample(rng)).collect())
}
