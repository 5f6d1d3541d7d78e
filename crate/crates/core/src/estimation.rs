//! Empirical covariance and the least-squares system estimate.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::lds::{simulate, SystemParams, TaskMatrix, Trajectory};
use crate::mc;

/// `X_T = (1/T) Σ_{i<T} x_i x_iᵀ` with its extreme eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    pub matrix: DMatrix<f64>,
    pub eig_min: f64,
    pub eig_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit {
    pub w_hat: DMatrix<f64>,
    /// `false` when `X_T` had an eigenvalue at or below the tolerance; `w_hat` is then zero.
    pub well_posed: bool,
}

pub fn sample_covariance(traj: &Trajectory) -> SampleCovariance {
    let (matrix, _) = second_moments(traj, traj.horizon());
    let eig = matrix.clone().symmetric_eigen();
    SampleCovariance { eig_min: eig.eigenvalues.min(), eig_max: eig.eigenvalues.max(), matrix }
}

/// `(1/T) Σ_{i<T} x_{i+1} x_iᵀ`.
pub fn cross_covariance(traj: &Trajectory) -> DMatrix<f64> {
    second_moments(traj, traj.horizon()).1
}

/// `(X_t, C_t)` over the first `t` transitions.
pub fn second_moments(traj: &Trajectory, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = traj.dim();
    let mut x = DMatrix::zeros(d, d);
    let mut c = DMatrix::zeros(d, d);
    for i in 0..t {
        let xi = &traj.states[i];
        x.ger(1.0, xi, xi, 1.0);
        c.ger(1.0, &traj.states[i + 1], xi, 1.0);
    }
    let scale = 1.0 / t as f64;
    (x * scale, c * scale)
}

/// Default degeneracy threshold `1e-8 · max(1, eig_max)`.
pub fn default_tolerance(cov: &SampleCovariance) -> f64 {
    1e-8 * cov.eig_max.max(1.0)
}

/// `Ŵ_T = C_T X_T⁻¹` solved in the eigenbasis of `X_T`; `tol = None` uses
/// [`default_tolerance`].
pub fn least_squares(traj: &Trajectory, tol: Option<f64>) -> LeastSquaresFit {
    let (x, c) = second_moments(traj, traj.horizon());
    let eig = x.symmetric_eigen();
    let eig_max = eig.eigenvalues.max();
    let tol = tol.unwrap_or(1e-8 * eig_max.max(1.0));
    let d = traj.dim();
    if eig.eigenvalues.min() <= tol {
        return LeastSquaresFit { w_hat: DMatrix::zeros(d, d), well_posed: false };
    }
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / l);
    }
    let x_inv = scaled * v.transpose();
    LeastSquaresFit { w_hat: c * x_inv, well_posed: true }
}

/// `‖Ŵ_T − W‖_op`, or `None` when the fit is degenerate.
pub fn estimation_error(traj: &Trajectory) -> Option<f64> {
    let fit = least_squares(traj, None);
    fit.well_posed.then(|| (fit.w_hat - &traj.task.matrix).singular_values().max())
}

/// `σ²/4 · I ≺ X ≺ 4σ²d/(1−w_max²) · I`.
pub fn satisfies_sandwich(params: &SystemParams, cov: &SampleCovariance) -> bool {
    let s2 = params.sigma * params.sigma;
    let upper = 4.0 * s2 * params.d as f64 / (1.0 - params.w_max * params.w_max);
    cov.eig_min > s2 / 4.0 && cov.eig_max < upper
}

/// Fraction of `n_trials` simulated trajectories of `task` whose `X_T`
/// satisfies [`satisfies_sandwich`].
pub fn covariance_sandwich_rate(params: &SystemParams, task: &TaskMatrix, n_trials: usize, seed: u64) -> Result<f64> {
    if n_trials == 0 {
        return Err(invalid("n_trials must be at least 1"));
    }
    params.validate()?;
    if task.dim() != params.d {
        return Err(Error::DimensionMismatch { expected: params.d, actual: task.dim() });
    }
    let est = mc::estimate(n_trials, seed, |rng, m, acc| {
        use rand::Rng;
        for _ in 0..m {
            let traj = simulate(params, task, rng.random()).expect("validated inputs");
            acc.push(if satisfies_sandwich(params, &sample_covariance(&traj)) { 1.0 } else { 0.0 });
        }
    });
    Ok(est.mean)
}
