//! The explicit deep transformer that unrolls modified Richardson iteration.
//!
//! With `z_{t,0} = 0` and `z_{t,ℓ} = z_{t,ℓ-1} + α (x_t − X_t z_{t,ℓ-1})`, where
//! `X_t = (1/t) Σ_{i<t} x_i x_iᵀ`, the stack returned by
//! [`assemble_construction`] predicts
//!
//! ```text
//! ŷ_t = ( (1/t) Σ_{i<t} x_{i+1} x_iᵀ ) · z_{t,L}
//! ```
//!
//! at every position: `L` Richardson layers followed by one readout layer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lds::SystemParams;
use crate::transformer::{LayerWeights, TransformerStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RichardsonSchedule {
    pub alpha: f64,
    /// Number of Richardson layers `L`; the stack has `L + 1` layers.
    pub depth: usize,
    pub c_alpha: f64,
}

impl RichardsonSchedule {
    pub fn new(alpha: f64, depth: usize, c_alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha, depth, c_alpha })
    }
}

/// `α = 8(1−w²) / (σ² (16d + 1 − w²))` with `w = w_max`.
pub fn proof_alpha(params: &SystemParams) -> f64 {
    let gap = 1.0 - params.w_max * params.w_max;
    8.0 * gap / (params.sigma * params.sigma * (16.0 * params.d as f64 + gap))
}

/// `c_α = 1 − 4(1−w²) / (16d + 1 − w²)` with `w = w_max`.
pub fn proof_contraction(params: &SystemParams) -> f64 {
    let gap = 1.0 - params.w_max * params.w_max;
    1.0 - 4.0 * gap / (16.0 * params.d as f64 + gap)
}

/// Step size and contraction constant from the upper-bound construction, with
/// depth `L = ⌈κ · log T / (2 log(1/c_α))⌉`.
pub fn proof_schedule(params: &SystemParams, kappa: f64) -> Result<RichardsonSchedule> {
    params.validate()?;
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(invalid(format!("kappa must be nonnegative, got {kappa}")));
    }
    let alpha = proof_alpha(params);
    let c_alpha = proof_contraction(params);
    let depth = (kappa * (params.horizon as f64).ln() / (2.0 * (1.0 / c_alpha).ln())).ceil().max(0.0);
    RichardsonSchedule::new(alpha, depth as usize, c_alpha)
}

/// Eigenvalue window `[σ²/2, 4σ²d/(1−w²) − σ²/4]` on which `|1 − αλ| ≤ c_α`
/// holds for the proof step size.
pub fn certified_window(params: &SystemParams) -> (f64, f64) {
    let s2 = params.sigma * params.sigma;
    let gap = 1.0 - params.w_max * params.w_max;
    (s2 / 2.0, 4.0 * s2 * params.d as f64 / gap - s2 / 4.0)
}

/// `‖I − αX‖_op` for symmetric `X`.
pub fn contraction_factor(x: &DMatrix<f64>, alpha: f64) -> f64 {
    let eig = x.clone().symmetric_eigen();
    eig.eigenvalues.iter().map(|&l| (1.0 - alpha * l).abs()).fold(0.0, f64::max)
}

/// `L` steps of `z ← z + α (b − X z)` from `z = 0`.
pub fn richardson_iterate(x: &DMatrix<f64>, b: &DVector<f64>, alpha: f64, steps: usize) -> DVector<f64> {
    let mut z = DVector::zeros(b.len());
    for _ in 0..steps {
        let residual = b - x * &z;
        z.axpy(alpha, &residual, 1.0);
    }
    z
}

fn eye(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d)
}

fn set_block(m: &mut DMatrix<f64>, d: usize, row: usize, col: usize, block: &DMatrix<f64>) {
    m.view_mut((row * d, col * d), (d, d)).copy_from(block);
}

/// One Richardson step on both placeholder slots.
///
/// Block layout (`d × d` blocks, slots `a, b, x_t, x_{t-1}`):
/// `W_P` has `I` at (1,4) and (2,4); `W_Q` has `−αI` at (4,1);
/// `W_MLP = [[I,0,αI,0],[0,I,αI,0],[0,0,I,0],[0,0,0,I]]`.
/// The attention term is `(−α X_t a_t, −α X_t a_t, 0, 0)`, so tokens with
/// `a_t = b_t` leave as `(a_t + α(x_t − X_t a_t), same, x_t, x_{t-1})`.
pub fn build_richardson_layer(d: usize, alpha: f64) -> LayerWeights {
    let n = 4 * d;
    let i = eye(d);
    let mut w_p = DMatrix::zeros(n, n);
    set_block(&mut w_p, d, 0, 3, &i);
    set_block(&mut w_p, d, 1, 3, &i);
    let mut w_q = DMatrix::zeros(n, n);
    set_block(&mut w_q, d, 3, 0, &(&i * -alpha));
    let mut w_mlp = DMatrix::identity(n, n);
    set_block(&mut w_mlp, d, 0, 2, &(&i * alpha));
    set_block(&mut w_mlp, d, 1, 2, &(&i * alpha));
    LayerWeights { w_mlp, w_p, w_q }
}

/// Cross-covariance readout: on tokens `(a_t, a_t, x_t, x_{t-1})` the first
/// `d` outputs are `((1/t) Σ_{i<t} x_{i+1} x_iᵀ) a_t`.
///
/// `W_P` has `I` at (1,3), `W_Q` has `I` at (4,1). The residual leaves `a_t`
/// in slot 1 alongside the attention output, so the first block row of
/// `W_MLP` is `(I, −I, 0, 0)`; the remaining rows are identity.
pub fn build_readout_layer(d: usize) -> LayerWeights {
    let n = 4 * d;
    let i = eye(d);
    let mut w_p = DMatrix::zeros(n, n);
    set_block(&mut w_p, d, 0, 2, &i);
    let mut w_q = DMatrix::zeros(n, n);
    set_block(&mut w_q, d, 3, 0, &i);
    let mut w_mlp = DMatrix::identity(n, n);
    set_block(&mut w_mlp, d, 0, 1, &(-&i));
    LayerWeights { w_mlp, w_p, w_q }
}

/// `L` Richardson layers followed by the readout layer.
pub fn assemble_construction(params: &SystemParams, schedule: &RichardsonSchedule) -> Result<TransformerStack> {
    params.validate()?;
    RichardsonSchedule::new(schedule.alpha, schedule.depth, schedule.c_alpha)?;
    let mut layers = vec![build_richardson_layer(params.d, schedule.alpha); schedule.depth];
    layers.push(build_readout_layer(params.d));
    TransformerStack::new(params.d, layers)
}
