//! Monte-Carlo estimates with standard errors and deterministic chunked evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lds::{derive_seed, rng_from_seed, SimRng};

/// Mean, standard error (sample standard deviation over `√n`) and sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl LossEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut acc = Accumulator::default();
        samples.iter().for_each(|&x| acc.push(x));
        acc.estimate()
    }
}

/// Welford running moments.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. pairwise merge.
    pub fn merge(&mut self, other: &Accumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn estimate(&self) -> LossEstimate {
        let se = if self.n >= 2 {
            (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
        } else {
            f64::NAN
        };
        LossEstimate { mean: self.mean, se, n: self.n }
    }
}

/// Samples per chunk; chunk `k` draws from `rng_from_seed(derive_seed(seed, k))`.
pub const CHUNK: usize = 256;

/// Estimates `E[f]` over `n` draws. `sample_chunk(rng, m, acc)` must push `m` samples.
///
/// Chunks run on the rayon pool and are merged in chunk order, so the result
/// is a pure function of `(seed, n)`.
pub fn estimate<F>(n: usize, seed: u64, sample_chunk: F) -> LossEstimate
where
    F: Fn(&mut SimRng, usize, &mut Accumulator) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<Accumulator> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let m = CHUNK.min(n - k * CHUNK);
            let mut rng = rng_from_seed(derive_seed(seed, k as u64));
            let mut acc = Accumulator::default();
            sample_chunk(&mut rng, m, &mut acc);
            acc
        })
        .collect();
    let mut total = Accumulator::default();
    partial.iter().for_each(|a| total.merge(a));
    total.estimate()
}
