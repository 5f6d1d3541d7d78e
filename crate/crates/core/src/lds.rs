//! Noisy linear dynamical systems `x_t = W x_{t-1} + ξ_t`, `x_0 = 0`.
//!
//! Tasks are symmetric matrices with spectrum strictly inside
//! `(w_min, w_max) ⊂ (0, 1)`; noise is isotropic Gaussian with scale `sigma`.
//! Every stochastic entry point takes an explicit 64-bit seed.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative margin kept between sampled eigenvalues and the spectrum bounds.
pub const SPECTRUM_MARGIN: f64 = 1e-6;

/// Generator used for every stochastic operation in the crate.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for the `index`-th worker or chunk of a job seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub d: usize,
    pub sigma: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Number of transitions `T`.
    #[serde(rename = "T")]
    pub horizon: usize,
}

impl SystemParams {
    pub fn new(d: usize, sigma: f64, w_min: f64, w_max: f64, horizon: usize) -> Result<Self> {
        let params = Self { d, sigma, w_min, w_max, horizon };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("d must be at least 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0 < self.w_min && self.w_min < self.w_max && self.w_max < 1.0) {
            return Err(invalid(format!(
                "spectrum bounds must satisfy 0 < w_min < w_max < 1, got ({}, {})",
                self.w_min, self.w_max
            )));
        }
        if self.horizon < 2 {
            return Err(invalid(format!("horizon T must be at least 2, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self { horizon, ..*self }
    }

    /// Checks that `task` has the right dimension and a spectrum inside the open interval.
    pub fn check_task(&self, task: &TaskMatrix) -> Result<()> {
        if task.dim() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, actual: task.dim() });
        }
        if let Some(&bad) = task.spectrum.iter().find(|&&l| !(self.w_min < l && l < self.w_max)) {
            return Err(invalid(format!(
                "task eigenvalue {bad} outside ({}, {})",
                self.w_min, self.w_max
            )));
        }
        Ok(())
    }
}

/// A symmetric task matrix together with its eigendecomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMatrix {
    pub matrix: DMatrix<f64>,
    pub spectrum: Vec<f64>,
    /// Orthonormal eigenvectors, column `i` pairs with `spectrum[i]`.
    pub eigenvectors: DMatrix<f64>,
}

impl TaskMatrix {
    pub fn scalar(w: f64) -> Self {
        Self::diagonal(&[w])
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let d = values.len();
        Self {
            matrix: DMatrix::from_diagonal(&DVector::from_column_slice(values)),
            spectrum: values.to_vec(),
            eigenvectors: DMatrix::identity(d, d),
        }
    }

    pub fn from_symmetric(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(invalid("task matrix must be square and nonempty"));
        }
        let scale = matrix.amax().max(1.0);
        if (&matrix - matrix.transpose()).amax() > 1e-12 * scale {
            return Err(invalid("task matrix must be symmetric"));
        }
        let eig = matrix.clone().symmetric_eigen();
        Ok(Self {
            matrix,
            spectrum: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for (j, &l) in self.spectrum.iter().enumerate() {
            let fl = f(l);
            scaled.column_mut(j).scale_mut(fl);
        }
        let out = scaled * v.transpose();
        (&out + out.transpose()) * 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// `Q · diag(λ) · Qᵀ` with Haar-random orthogonal `Q`.
    #[default]
    Dense,
    /// `diag(λ)`.
    Diagonal,
}

/// Draws a task with eigenvalues uniform on `(w_min, w_max)` (shrunk by
/// [`SPECTRUM_MARGIN`] at both ends).
pub fn sample_task<R: Rng + ?Sized>(
    params: &SystemParams,
    mode: TaskMode,
    rng: &mut R,
) -> Result<TaskMatrix> {
    params.validate()?;
    let d = params.d;
    let margin = SPECTRUM_MARGIN * (params.w_max - params.w_min);
    let lo = params.w_min + margin;
    let hi = params.w_max - margin;
    let spectrum: Vec<f64> = (0..d).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    match mode {
        TaskMode::Diagonal => Ok(TaskMatrix::diagonal(&spectrum)),
        TaskMode::Dense => {
            let q = haar_orthogonal(d, rng);
            let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&spectrum));
            let w = &q * lambda * q.transpose();
            let w = (&w + w.transpose()) * 0.5;
            // Keep the sampled spectrum exact; eigenvectors are the Haar columns.
            Ok(TaskMatrix { matrix: w, spectrum, eigenvectors: q })
        }
    }
}

/// Haar-distributed orthogonal matrix via sign-corrected QR of a Gaussian matrix.
pub fn haar_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// States `x_0, …, x_T` of one sampled system.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub task: TaskMatrix,
    pub seed: u64,
}

impl Trajectory {
    /// Builds a trajectory from explicit states (simulated ones start at zero).
    pub fn from_states(task: TaskMatrix, states: Vec<DVector<f64>>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::Empty("trajectory needs at least one transition"));
        }
        let d = task.dim();
        if let Some(bad) = states.iter().find(|x| x.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, actual: bad.len() });
        }
        Ok(Self { states, task, seed: 0 })
    }

    /// Convenience constructor for scalar systems.
    pub fn from_scalar_states(w: f64, states: &[f64]) -> Result<Self> {
        let states = states.iter().map(|&x| DVector::from_element(1, x)).collect();
        Self::from_states(TaskMatrix::scalar(w), states)
    }

    pub fn dim(&self) -> usize {
        self.task.dim()
    }

    /// Number of transitions `T`.
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &DVector<f64> {
        &self.states[self.states.len() - 1]
    }

    /// CSV rows `t,x0,…,x{d-1}` with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> =
            std::iter::once("t".to_string()).chain((0..self.dim()).map(|i| format!("x{i}"))).collect();
        writeln!(out, "{}", header.join(","))?;
        for (t, x) in self.states.iter().enumerate() {
            let row: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{t},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Simulates `T = params.horizon` transitions of `task` with noise drawn from `seed`.
pub fn simulate(params: &SystemParams, task: &TaskMatrix, seed: u64) -> Result<Trajectory> {
    params.validate()?;
    if task.dim() != params.d {
        return Err(Error::DimensionMismatch { expected: params.d, actual: task.dim() });
    }
    let mut rng = rng_from_seed(seed);
    let d = params.d;
    let noise = (0..params.horizon).map(|_| {
        DVector::from_fn(d, |_, _| params.sigma * rng.sample::<f64, _>(StandardNormal))
    });
    let mut traj = propagate(task, noise);
    traj.seed = seed;
    Ok(traj)
}

/// Runs the recursion with an explicit noise sequence `ξ_1, ξ_2, …`.
pub fn simulate_with_noise(task: &TaskMatrix, noise: &[DVector<f64>]) -> Result<Trajectory> {
    if noise.is_empty() {
        return Err(Error::Empty("noise sequence"));
    }
    if let Some(bad) = noise.iter().find(|x| x.len() != task.dim()) {
        return Err(Error::DimensionMismatch { expected: task.dim(), actual: bad.len() });
    }
    Ok(propagate(task, noise.iter().cloned()))
}

fn propagate(task: &TaskMatrix, noise: impl Iterator<Item = DVector<f64>>) -> Trajectory {
    let d = task.dim();
    let mut states = vec![DVector::zeros(d)];
    for xi in noise {
        let prev = &states[states.len() - 1];
        let next = &task.matrix * prev + xi;
        states.push(next);
    }
    Trajectory { states, task: task.clone(), seed: 0 }
}

/// Fills `out[0..=T]` with a scalar trajectory driven by `rng`; `out[0] = 0`.
pub(crate) fn simulate_scalar_into<R: Rng + ?Sized>(w: f64, sigma: f64, out: &mut [f64], rng: &mut R) {
    out[0] = 0.0;
    for t in 1..out.len() {
        out[t] = w * out[t - 1] + sigma * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Fills `out` (row-major, `x_t = out[t*d..(t+1)*d]`) with `out.len()/d`
/// states of `task` driven by `rng`; the first state is zero.
pub(crate) fn simulate_into<R: Rng + ?Sized>(task: &TaskMatrix, sigma: f64, out: &mut [f64], rng: &mut R) {
    let d = task.dim();
    if d == 1 {
        return simulate_scalar_into(task.matrix[(0, 0)], sigma, out, rng);
    }
    out[..d].fill(0.0);
    for t in 1..out.len() / d {
        let (prev, cur) = out[(t - 1) * d..(t + 1) * d].split_at_mut(d);
        for (i, slot) in cur.iter_mut().enumerate() {
            let noise = sigma * rng.sample::<f64, _>(StandardNormal);
            *slot = prev.iter().enumerate().fold(noise, |acc, (j, x)| acc + task.matrix[(i, j)] * x);
        }
    }
}

/// `Cov(x_t) = σ² (I − W^{2t}) (I − W²)^{-1}`, evaluated in the eigenbasis of `W`.
pub fn marginal_covariance(params: &SystemParams, task: &TaskMatrix, t: usize) -> Result<DMatrix<f64>> {
    if t == 0 || t > params.horizon {
        return Err(Error::TimeOutOfRange { t, max: params.horizon });
    }
    if task.dim() != params.d {
        return Err(Error::DimensionMismatch { expected: params.d, actual: task.dim() });
    }
    let s2 = params.sigma * params.sigma;
    Ok(task.spectral_map(|l| s2 * scalar_marginal_factor(l, t)))
}

/// `(1 − λ^{2t}) / (1 − λ²)` = `Σ_{k<t} λ^{2k}`.
pub(crate) fn scalar_marginal_factor(lambda: f64, t: usize) -> f64 {
    let l2 = lambda * lambda;
    if (1.0 - l2).abs() < 1e-12 {
        return t as f64;
    }
    (1.0 - l2.powi(t as i32)) / (1.0 - l2)
}
