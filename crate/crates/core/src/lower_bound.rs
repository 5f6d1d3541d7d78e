//! Min-max of the single-layer limiting loss over a finite set of tasks:
//! `C = inf_α max_i ℓ(α; w_i)`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::single_layer::{limiting_loss, AlphaPair};

/// Half-width of the search box `[−B, B]²` for `α`.
pub const SEARCH_BOX: f64 = 10.0;
/// Points per axis of the starting grid.
pub const COARSE_GRID: usize = 201;
/// Nelder–Mead stops once the simplex diameter drops below this.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// A task is active when its loss is within this of the max.
pub const ACTIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxResult {
    #[serde(rename = "C_value")]
    pub c_value: f64,
    pub argmin: AlphaPair,
    pub active_ws: Vec<f64>,
    pub sigma: f64,
    pub w_points: Vec<f64>,
}

/// `max_i ℓ(α; w_i)`.
pub fn minmax_objective(alpha: &AlphaPair, w_points: &[f64], sigma: f64) -> f64 {
    w_points.iter().map(|&w| limiting_loss(alpha, w, sigma)).fold(f64::NEG_INFINITY, f64::max)
}

fn check_points(sigma: f64, w_points: &[f64]) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if w_points.is_empty() {
        return Err(Error::Empty("task points"));
    }
    if let Some(&bad) = w_points.iter().find(|&&w| !(0.0 < w && w < 1.0)) {
        return Err(invalid(format!("task {bad} outside (0, 1)")));
    }
    for (i, a) in w_points.iter().enumerate() {
        if w_points[i + 1..].contains(a) {
            return Err(Error::Degenerate(format!("repeated task {a}")));
        }
    }
    Ok(())
}

/// Minimizes `max_i ℓ(α; w_i)` over `α ∈ R²`: best point of a coarse grid on
/// the search box, then Nelder–Mead with restarts.
///
/// Fails with [`Error::BoundaryMinimizer`] if the minimizer is not interior to
/// the box.
pub fn three_point_minmax(sigma: f64, w_points: &[f64]) -> Result<MinMaxResult> {
    check_points(sigma, w_points)?;
    let f = |x: [f64; 2]| minmax_objective(&AlphaPair { alpha1: x[0], alpha2: x[1] }, w_points, sigma);

    let step = 2.0 * SEARCH_BOX / (COARSE_GRID - 1) as f64;
    let mut best = ([0.0, 0.0], f64::INFINITY);
    for i in 0..COARSE_GRID {
        for j in 0..COARSE_GRID {
            let x = [-SEARCH_BOX + i as f64 * step, -SEARCH_BOX + j as f64 * step];
            let v = f(x);
            if v < best.1 {
                best = (x, v);
            }
        }
    }

    let (x, c_value) = nelder_mead_restarts(&f, best.0, step);
    if x.iter().any(|v| v.abs() >= SEARCH_BOX) {
        return Err(Error::BoundaryMinimizer(x[0], x[1]));
    }
    let argmin = AlphaPair { alpha1: x[0], alpha2: x[1] };
    let active_ws = w_points
        .iter()
        .copied()
        .filter(|&w| limiting_loss(&argmin, w, sigma) >= c_value - ACTIVE_TOL)
        .collect();
    Ok(MinMaxResult { c_value, argmin, active_ws, sigma, w_points: w_points.to_vec() })
}

/// `n` points `((n−1−k) a + k b)/(n−1)`, endpoints included.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let m = (n - 1) as f64;
    (0..n).map(|k| ((m - k as f64) * a + k as f64 * b) / m).collect()
}

/// [`three_point_minmax`] on `grid_n` uniform tasks in `[w_min, w_max]`.
pub fn grid_sup_minmax(sigma: f64, w_min: f64, w_max: f64, grid_n: usize) -> Result<MinMaxResult> {
    if grid_n < 3 {
        return Err(invalid(format!("grid_n must be at least 3, got {grid_n}")));
    }
    if !(w_min < w_max) {
        return Err(invalid(format!("need w_min < w_max, got ({w_min}, {w_max})")));
    }
    three_point_minmax(sigma, &uniform_grid(w_min, w_max, grid_n))
}

fn nelder_mead_restarts(f: &impl Fn([f64; 2]) -> f64, start: [f64; 2], scale: f64) -> ([f64; 2], f64) {
    let (mut x, mut fx) = nelder_mead(f, start, scale);
    for _ in 0..20 {
        let (y, fy) = nelder_mead(f, x, scale);
        let moved = (y[0] - x[0]).hypot(y[1] - x[1]);
        let gained = fy < fx;
        if gained {
            x = y;
            fx = fy;
        }
        if !gained || moved < SIMPLEX_TOL {
            break;
        }
    }
    (x, fx)
}

fn nelder_mead(f: &impl Fn([f64; 2]) -> f64, start: [f64; 2], scale: f64) -> ([f64; 2], f64) {
    let mut s = [start, [start[0] + scale, start[1]], [start[0], start[1] + scale]];
    let mut v = s.map(f);
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];

    for _ in 0..100_000 {
        let mut order = [0, 1, 2];
        order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        s = order.map(|i| s[i]);
        v = order.map(|i| v[i]);

        let diam = (1..3).map(|k| (s[k][0] - s[0][0]).hypot(s[k][1] - s[0][1])).fold(0.0, f64::max);
        if diam < SIMPLEX_TOL {
            break;
        }
        let centroid = lerp(s[0], s[1], 0.5);
        let reflect = lerp(centroid, s[2], -1.0);
        let fr = f(reflect);
        if fr < v[0] {
            let expand = lerp(centroid, s[2], -2.0);
            let fe = f(expand);
            (s[2], v[2]) = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < v[1] {
            (s[2], v[2]) = (reflect, fr);
        } else {
            let contract = if fr < v[2] { lerp(centroid, reflect, 0.5) } else { lerp(centroid, s[2], 0.5) };
            let fc = f(contract);
            if fc < v[2].min(fr) {
                (s[2], v[2]) = (contract, fc);
            } else {
                for k in 1..3 {
                    s[k] = lerp(s[0], s[k], 0.5);
                    v[k] = f(s[k]);
                }
            }
        }
    }
    let k = (0..3).min_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
    (s[k], v[k])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCheck {
    pub rank_coefficient: usize,
    pub rank_augmented: usize,
    pub inconsistent: bool,
}

/// Ranks of the system `σ²w_i/(1−w_i²) x + σ²/(1−w_i²) y = w_i` for three tasks.
///
/// Rows are normalized first (rank-preserving), then ranks are counted as
/// singular values above `1e-10 · ‖M‖₂`.
pub fn rank_inconsistency_check(sigma: f64, w_triple: &[f64]) -> Result<RankCheck> {
    if w_triple.len() != 3 {
        return Err(invalid(format!("expected three tasks, got {}", w_triple.len())));
    }
    check_points(sigma, w_triple)?;
    let s2 = sigma * sigma;
    let mut full = DMatrix::zeros(3, 3);
    for (i, &w) in w_triple.iter().enumerate() {
        let v = s2 / (1.0 - w * w);
        let row = [v * w, v, w];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, x) in row.iter().enumerate() {
            full[(i, j)] = x / norm;
        }
    }
    let rank = |m: DMatrix<f64>| {
        let sv = m.singular_values();
        let tol = 1e-10 * sv.max();
        sv.iter().filter(|&&s| s > tol).count()
    };
    let rank_augmented = rank(full.clone());
    let rank_coefficient = rank(full.columns(0, 2).into_owned());
    Ok(RankCheck { rank_coefficient, rank_augmented, inconsistent: rank_augmented > rank_coefficient })
}

/// Appends `sigma,w_points,C_value,alpha1,alpha2,active_ws` (writing a header
/// first when `write_header`). Task lists are `;`-separated.
pub fn append_ledger_row<W: Write>(out: &mut W, result: &MinMaxResult, write_header: bool) -> Result<()> {
    if write_header {
        writeln!(out, "sigma,w_points,C_value,alpha1,alpha2,active_ws")?;
    }
    let join = |ws: &[f64]| ws.iter().map(|w| format!("{w:.16e}")).collect::<Vec<_>>().join(";");
    writeln!(
        out,
        "{:.16e},{},{:.16e},{:.16e},{:.16e},{}",
        result.sigma,
        join(&result.w_points),
        result.c_value,
        result.argmin.alpha1,
        result.argmin.alpha2,
        join(&result.active_ws)
    )?;
    Ok(())
}
