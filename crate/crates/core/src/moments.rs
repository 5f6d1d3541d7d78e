//! Gaussian moments of the scalar chain `x_t = w x_{t-1} + ξ_t`, `x_0 = 0`.
//!
//! Two independent routes: Isserlis/Wick pairings over the exact chain
//! covariance, and closed-form identities for the fourth- and sixth-order
//! sums that enter the single-layer limiting loss.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// Largest moment order accepted by [`isserlis_moment`] (105 pairings).
pub const MAX_ORDER: usize = 8;

/// Covariance of the scalar chain:
/// `Cov(x_i, x_j) = σ² w^{|i−j|} (1 − w^{2 min(i,j)}) / (1 − w²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainCovariance {
    pub w: f64,
    pub sigma: f64,
    pub t_max: usize,
}

pub fn chain_covariance(w: f64, sigma: f64, t_max: usize) -> Result<ChainCovariance> {
    if !(0.0 < w && w < 1.0) {
        return Err(invalid(format!("w must lie in (0, 1), got {w}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(ChainCovariance { w, sigma, t_max })
}

impl ChainCovariance {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        let w2 = self.w * self.w;
        self.sigma * self.sigma * self.w.powi((hi - lo) as i32) * (1.0 - w2.powi(lo as i32)) / (1.0 - w2)
    }

    /// Dense `(t_max+1) × (t_max+1)` matrix indexed from time 0.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.t_max + 1, self.t_max + 1, |i, j| self.entry(i, j))
    }
}

/// `E[x_{i_1} ⋯ x_{i_{2m}}]` as the sum over all perfect pairings of products
/// of covariances.
pub fn isserlis_moment(cov: &ChainCovariance, indices: &[usize]) -> Result<f64> {
    if let Some(&bad) = indices.iter().find(|&&i| i > cov.t_max) {
        return Err(invalid(format!("time index {bad} exceeds t_max = {}", cov.t_max)));
    }
    isserlis_with(indices, |i, j| cov.entry(i, j))
}

/// Wick sum for an arbitrary covariance function.
pub fn isserlis_with(indices: &[usize], cov: impl Fn(usize, usize) -> f64) -> Result<f64> {
    if !indices.len().is_multiple_of(2) {
        return Err(invalid(format!("odd number of factors ({})", indices.len())));
    }
    if indices.len() > MAX_ORDER {
        return Err(invalid(format!("moment order {} exceeds {MAX_ORDER}", indices.len())));
    }
    let mut buf = [0usize; MAX_ORDER];
    buf[..indices.len()].copy_from_slice(indices);
    Ok(pairings(&mut buf[..indices.len()], &cov))
}

fn pairings(idx: &mut [usize], cov: &impl Fn(usize, usize) -> f64) -> f64 {
    let n = idx.len();
    if n == 0 {
        return 1.0;
    }
    // Pair the first element with each later one and recurse on the rest.
    let mut total = 0.0;
    for k in 1..n {
        idx.swap(1, k);
        total += cov(idx[0], idx[1]) * pairings(&mut idx[2..], cov);
        idx.swap(1, k);
    }
    total
}

/// Number of perfect pairings of `2m` items, `(2m − 1)!!`.
pub fn pairing_count(order: usize) -> usize {
    (1..order).step_by(2).product()
}

/// Closed form of `Σ_{i=1}^{t} E[x_i x_{i−1} x_t²]`.
pub fn fourth_moment_sum_closed_form(w: f64, sigma: f64, t: usize) -> f64 {
    let s4 = sigma.powi(4);
    let g = 1.0 - w * w;
    let w2t = (w * w).powi(t as i32);
    // w^{2t+1} and w^{2t-1} from the same power.
    let w2t_p1 = w2t * w;
    let w2t_m1 = if t == 0 { w.recip() } else { (w * w).powi(t as i32 - 1) * w };
    let tf = t as f64;
    s4 * (1.0 - w2t) / g * (3.0 * w2t_p1 + w) / (g * g) + s4 * tf * (-3.0 * w2t_p1 - 2.0 * w2t_m1 + w) / (g * g)
}

/// `(lim (1/t) Σ E[x_i x_{i−1} x_t²], lim (1/t) Σ E[x_i² x_t²])` =
/// `(σ⁴ w / (1−w²)², σ⁴ / (1−w²)²)`. Valid for `|w| < 1`.
pub fn fourth_moment_limits(w: f64, sigma: f64) -> (f64, f64) {
    let s4 = sigma.powi(4);
    let g2 = (1.0 - w * w).powi(2);
    (s4 * w / g2, s4 / g2)
}

/// Limits of `(1/t²) E[(Σ x_i x_{i−1})² x_t²]`, `(1/t²) E[(Σ x_{i−1}²)² x_t²]`
/// and `(1/t²) E[(Σ x_i x_{i−1})(Σ x_{i−1}²) x_t²]`:
/// `σ⁶ (w², 1, w) / (1−w²)³`. Valid for `|w| < 1`.
pub fn sixth_moment_limits(w: f64, sigma: f64) -> (f64, f64, f64) {
    let s6 = sigma.powi(6);
    let g3 = (1.0 - w * w).powi(3);
    (s6 * w * w / g3, s6 / g3, s6 * w / g3)
}

/// Isserlis partial sums `Σ_{i=1}^{t} E[x_i x_{i−1} x_t²]`, `Σ E[x_i² x_t²]`
/// and `Σ E[x_{i−1}² x_t²]`.
pub fn fourth_moment_sums_oracle(cov: &ChainCovariance, t: usize) -> Result<(f64, f64, f64)> {
    let mut cross = 0.0;
    let mut sq = 0.0;
    let mut sq_lag = 0.0;
    for i in 1..=t {
        cross += isserlis_moment(cov, &[i, i - 1, t, t])?;
        sq += isserlis_moment(cov, &[i, i, t, t])?;
        sq_lag += isserlis_moment(cov, &[i - 1, i - 1, t, t])?;
    }
    Ok((cross, sq, sq_lag))
}

/// Isserlis double sums `E[(Σ x_i x_{i−1})² x_t²]`, `E[(Σ x_{i−1}²)² x_t²]`
/// and `E[(Σ x_i x_{i−1})(Σ x_{i−1}²) x_t²]`, each over `i, j ∈ 1..=t`.
pub fn sixth_moment_sums_oracle(cov: &ChainCovariance, t: usize) -> Result<(f64, f64, f64)> {
    if t > cov.t_max {
        return Err(invalid(format!("t = {t} exceeds t_max = {}", cov.t_max)));
    }
    let m = cov.matrix();
    let c = |i: usize, j: usize| m[(i, j)];
    let (mut a, mut b, mut ab) = (0.0, 0.0, 0.0);
    for i in 1..=t {
        for j in 1..=t {
            a += isserlis_with(&[i, i - 1, j, j - 1, t, t], c)?;
            b += isserlis_with(&[i - 1, i - 1, j - 1, j - 1, t, t], c)?;
            ab += isserlis_with(&[i, i - 1, j - 1, j - 1, t, t], c)?;
        }
    }
    Ok((a, b, ab))
}
