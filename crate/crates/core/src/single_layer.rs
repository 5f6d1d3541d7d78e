//! The one-dimensional single-layer predictor
//! `ŷ_T = (1/T) pᵀ G q x_T` with `G = [[Σx_i², Σx_i x_{i−1}], [Σx_i x_{i−1}, Σx_{i−1}²]]`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lds::{rng_from_seed, simulate_scalar_into, SystemParams, Trajectory};
use crate::mc::{self, LossEstimate};
use crate::transformer::{LayerWeights, TransformerStack};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleLayerParams {
    pub p: [f64; 2],
    pub q: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPair {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl SingleLayerParams {
    pub const ZERO: Self = Self { p: [0.0; 2], q: [0.0; 2] };

    pub fn new(p: [f64; 2], q: [f64; 2]) -> Self {
        Self { p, q }
    }

    /// `pᵀ G q` for the Gram entries `(Σx_i², Σx_i x_{i−1}, Σx_{i−1}²)`.
    fn bilinear(&self, g: &Gram) -> f64 {
        let [p1, p2] = self.p;
        let [q1, q2] = self.q;
        p1 * (g.cur * q1 + g.cross * q2) + p2 * (g.cross * q1 + g.prev * q2)
    }

    /// Scales `p` and `q` back into the ball of radius `r`.
    fn project(&mut self, r: f64) {
        for v in [&mut self.p, &mut self.q] {
            let norm = v[0].hypot(v[1]);
            if norm > r {
                v[0] *= r / norm;
                v[1] *= r / norm;
            }
        }
    }
}

/// `α₁ = p₁q₂ + p₂q₁`, `α₂ = p₁q₁ + p₂q₂`.
pub fn alpha_map(params: &SingleLayerParams) -> AlphaPair {
    let [p1, p2] = params.p;
    let [q1, q2] = params.q;
    AlphaPair { alpha1: p1 * q2 + p2 * q1, alpha2: p1 * q1 + p2 * q2 }
}

/// `p = (1, 0)`, `q = (α₂, α₁)`.
pub fn alpha_preimage(target: &AlphaPair) -> SingleLayerParams {
    SingleLayerParams { p: [1.0, 0.0], q: [target.alpha2, target.alpha1] }
}

/// Sufficient statistics of a scalar trajectory for the predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Gram {
    cur: f64,
    cross: f64,
    prev: f64,
    last: f64,
    horizon: usize,
}

impl Gram {
    fn from_states(xs: &[f64]) -> Self {
        let (mut cur, mut cross, mut prev) = (0.0, 0.0, 0.0);
        for s in xs.windows(2) {
            cur += s[1] * s[1];
            cross += s[1] * s[0];
            prev += s[0] * s[0];
        }
        Self { cur, cross, prev, last: xs[xs.len() - 1], horizon: xs.len() - 1 }
    }

    fn predict(&self, params: &SingleLayerParams) -> f64 {
        params.bilinear(self) * self.last / self.horizon as f64
    }
}

fn scalar_states(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, actual: traj.dim() });
    }
    Ok(traj.states.iter().map(|x| x[0]).collect())
}

pub fn predict(params: &SingleLayerParams, traj: &Trajectory) -> Result<f64> {
    Ok(Gram::from_states(&scalar_states(traj)?).predict(params))
}

/// `(ŷ_T − w x_T)²` on one trajectory.
pub fn trajectory_loss(params: &SingleLayerParams, w: f64, traj: &Trajectory) -> Result<f64> {
    let g = Gram::from_states(&scalar_states(traj)?);
    Ok((g.predict(params) - w * g.last).powi(2))
}

/// Monte-Carlo estimate of `E[(ŷ_T − w x_T)²]` over `n` fresh trajectories of
/// length `sys.horizon` with noise level `sys.sigma`.
pub fn individual_loss_mc(
    params: &SingleLayerParams,
    w: f64,
    sys: &SystemParams,
    n: usize,
    seed: u64,
) -> Result<LossEstimate> {
    sys.validate()?;
    if sys.d != 1 {
        return Err(Error::DimensionMismatch { expected: 1, actual: sys.d });
    }
    if n < 2 {
        return Err(invalid("need at least two samples"));
    }
    if !(w.abs() < 1.0) {
        return Err(invalid(format!("w must lie in (-1, 1), got {w}")));
    }
    let params = *params;
    Ok(mc::estimate(n, seed, |rng, m, acc| {
        let mut xs = vec![0.0; sys.horizon + 1];
        for _ in 0..m {
            simulate_scalar_into(w, sys.sigma, &mut xs, rng);
            let g = Gram::from_states(&xs);
            acc.push((g.predict(&params) - w * g.last).powi(2));
        }
    }))
}

/// `σ²/(1−w²) · (σ²/(1−w²) (w α₁ + α₂) − w)²`.
pub fn limiting_loss(alphas: &AlphaPair, w: f64, sigma: f64) -> f64 {
    let v = sigma * sigma / (1.0 - w * w);
    v * (v * (w * alphas.alpha1 + alphas.alpha2) - w).powi(2)
}

/// The one-layer, width-4 stack computing the same prediction.
///
/// With tokens `(0, 0, x_t, x_{t−1})` (1-based blocks): `W_Q` has `q₁` at (3,3)
/// and `q₂` at (4,3), so `W_Q e_t = x_t (0, 0, q₁, q₂)`; the first row of `W_P`
/// is `(0, 0, p₁, p₂)`, which reads `pᵀ G q x_t` into the prediction slot;
/// `W_MLP = I` and the residual leaves that slot untouched.
pub fn to_stack(params: &SingleLayerParams) -> TransformerStack {
    let mut w_p = DMatrix::zeros(4, 4);
    w_p[(0, 2)] = params.p[0];
    w_p[(0, 3)] = params.p[1];
    let mut w_q = DMatrix::zeros(4, 4);
    w_q[(2, 2)] = params.q[0];
    w_q[(3, 2)] = params.q[1];
    let layer = LayerWeights { w_mlp: DMatrix::identity(4, 4), w_p, w_q };
    TransformerStack { d: 1, layers: vec![layer] }
}

/// Gram statistics and target coefficient of one training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    gram: Gram,
    w: f64,
}

impl LossSample {
    pub fn from_trajectory(traj: &Trajectory, w: f64) -> Result<Self> {
        Ok(Self { gram: Gram::from_states(&scalar_states(traj)?), w })
    }
}

/// Mean squared error over `batch` and its gradient with respect to `(p, q)`.
pub fn empirical_loss_and_grad(params: &SingleLayerParams, batch: &[LossSample]) -> (f64, SingleLayerParams) {
    let mut loss = 0.0;
    let mut grad = SingleLayerParams::ZERO;
    let [p1, p2] = params.p;
    let [q1, q2] = params.q;
    for s in batch {
        let g = &s.gram;
        let scale = g.last / g.horizon as f64;
        let r = params.bilinear(g) * scale - s.w * g.last;
        loss += r * r;
        // d(pᵀGq)/dp = Gq, d(pᵀGq)/dq = Gp.
        let c = 2.0 * r * scale;
        grad.p[0] += c * (g.cur * q1 + g.cross * q2);
        grad.p[1] += c * (g.cross * q1 + g.prev * q2);
        grad.q[0] += c * (g.cur * p1 + g.cross * p2);
        grad.q[1] += c * (g.cross * p1 + g.prev * p2);
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    for v in [&mut grad.p, &mut grad.q] {
        v[0] *= inv;
        v[1] *= inv;
    }
    (loss * inv, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Radius of the ball `p` and `q` are projected onto.
    pub radius: f64,
    pub seed: u64,
    /// Starting point; drawn as small Gaussians when absent, since `p = q = 0`
    /// is a stationary point.
    pub init: Option<SingleLayerParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.01, epochs: 2000, batch: 64, radius: 10.0, seed: 0, init: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Loss on the fresh batch drawn for this epoch, before the update.
    pub loss: f64,
    pub params: SingleLayerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    pub diverged: bool,
    pub final_params: SingleLayerParams,
}

impl TrainingTrace {
    /// Mean recorded loss over the last `k` epochs.
    pub fn tail_loss(&self, k: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(k)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }

    /// Columns `epoch,loss,p1,p2,q1,q2`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,loss,p1,p2,q1,q2")?;
        for r in &self.rows {
            let [p1, p2] = r.params.p;
            let [q1, q2] = r.params.q;
            writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", r.epoch, r.loss, p1, p2, q1, q2)?;
        }
        Ok(())
    }
}

/// Projected gradient descent on the squared error, one fresh batch per epoch
/// with tasks drawn uniformly from `w_grid`.
pub fn train_single_layer(sys: &SystemParams, w_grid: &[f64], cfg: &TrainConfig) -> Result<TrainingTrace> {
    sys.validate()?;
    if sys.d != 1 {
        return Err(Error::DimensionMismatch { expected: 1, actual: sys.d });
    }
    if w_grid.is_empty() {
        return Err(Error::Empty("task grid"));
    }
    if let Some(&bad) = w_grid.iter().find(|w| !(w.abs() < 1.0)) {
        return Err(invalid(format!("task {bad} outside (-1, 1)")));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(invalid(format!("learning rate must be non-negative, got {}", cfg.lr)));
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(invalid("epochs and batch must be at least 1"));
    }
    if !(cfg.radius > 0.0) {
        return Err(invalid(format!("radius must be positive, got {}", cfg.radius)));
    }

    let mut rng = rng_from_seed(cfg.seed);
    let mut params = cfg.init.unwrap_or_else(|| {
        let mut draw = || 0.1 * rng.sample::<f64, _>(StandardNormal);
        SingleLayerParams { p: [draw(), draw()], q: [draw(), draw()] }
    });
    params.project(cfg.radius);

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut xs = vec![0.0; sys.horizon + 1];
    let mut batch = Vec::with_capacity(cfg.batch);
    for epoch in 0..cfg.epochs {
        batch.clear();
        for _ in 0..cfg.batch {
            let w = w_grid[rng.random_range(0..w_grid.len())];
            simulate_scalar_into(w, sys.sigma, &mut xs, &mut rng);
            batch.push(LossSample { gram: Gram::from_states(&xs), w });
        }
        let (loss, grad) = empirical_loss_and_grad(&params, &batch);
        rows.push(TraceRow { epoch, loss, params });
        if !(loss <= DIVERGENCE_THRESHOLD) {
            return Ok(TrainingTrace { rows, diverged: true, final_params: params });
        }
        for (v, g) in [(&mut params.p, grad.p), (&mut params.q, grad.q)] {
            v[0] -= cfg.lr * g[0];
            v[1] -= cfg.lr * g[1];
        }
        params.project(cfg.radius);
    }
    Ok(TrainingTrace { rows, diverged: false, final_params: params })
}
