//! Independent oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// `max_i v_i (v_i (w_i a1 + a2) − w_i)²`, written out independently of the crate.
pub fn minmax_value(sigma: f64, ws: &[f64], a1: f64, a2: f64) -> f64 {
    let s2 = sigma * sigma;
    let mut worst = 0.0f64;
    for &w in ws {
        let v = s2 / (1.0 - w * w);
        let r = v * (w * a1 + a2) - w;
        worst = worst.max(v * r * r);
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct GridOracle {
    /// Minimum over the initial dense grid alone.
    pub raw: f64,
    /// Minimum after zooming into the sublevel set.
    pub refined: f64,
    pub argmin: [f64; 2],
}

fn grid_min(sigma: f64, ws: &[f64], lo: [f64; 2], hi: [f64; 2], n: usize) -> (Vec<f64>, usize, [f64; 2]) {
    let step = [(hi[0] - lo[0]) / (n - 1) as f64, (hi[1] - lo[1]) / (n - 1) as f64];
    let mut vals = vec![0.0; n * n];
    let mut best = 0;
    for i in 0..n {
        let a1 = lo[0] + i as f64 * step[0];
        for j in 0..n {
            let a2 = lo[1] + j as f64 * step[1];
            let v = minmax_value(sigma, ws, a1, a2);
            vals[i * n + j] = v;
            if v < vals[best] {
                best = i * n + j;
            }
        }
    }
    (vals, best, step)
}

/// Dense `n0 × n0` grid over `[−10, 10]²`, then repeated zooms onto the
/// bounding box of the near-optimal grid points.
pub fn dense_grid_oracle(sigma: f64, ws: &[f64], n0: usize) -> GridOracle {
    let (mut lo, mut hi) = ([-10.0, -10.0], [10.0, 10.0]);
    let mut n = n0;
    let mut raw = f64::NAN;
    let mut result = (f64::INFINITY, [0.0, 0.0]);
    for round in 0..10 {
        let (vals, best, step) = grid_min(sigma, ws, lo, hi, n);
        let fmin = vals[best];
        let (bi, bj) = (best / n, best % n);
        let at = |i: usize, j: usize| [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
        if round == 0 {
            raw = fmin;
        }
        if fmin < result.0 {
            result = (fmin, at(bi, bj));
        }
        // Slack: twice the largest jump to a neighbour of the best point.
        let mut slack = 0.0f64;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (i, j) = (bi as i64 + di, bj as i64 + dj);
                if (0..n as i64).contains(&i) && (0..n as i64).contains(&j) {
                    slack = slack.max(vals[i as usize * n + j as usize] - fmin);
                }
            }
        }
        let level = fmin + 2.0 * slack;
        let (mut imin, mut imax, mut jmin, mut jmax) = (bi, bi, bj, bj);
        for i in 0..n {
            for j in 0..n {
                if vals[i * n + j] <= level {
                    imin = imin.min(i);
                    imax = imax.max(i);
                    jmin = jmin.min(j);
                    jmax = jmax.max(j);
                }
            }
        }
        let new_lo = at(imin.saturating_sub(1), jmin.saturating_sub(1));
        let new_hi = at((imax + 1).min(n - 1), (jmax + 1).min(n - 1));
        if (new_hi[0] - new_lo[0]).max(new_hi[1] - new_lo[1]) < 1e-12 {
            break;
        }
        lo = new_lo;
        hi = new_hi;
        n = 401;
    }
    GridOracle { raw, refined: result.0, argmin: result.1 }
}

/// Exact min-max by Chebyshev enumeration: with `u_i(α) = √v_i (v_i (w_i α₁ + α₂) − w_i)`
/// the value is `(min_α max_i |u_i|)²`, attained on a reference of at most three tasks.
pub fn chebyshev_minmax(sigma: f64, ws: &[f64]) -> f64 {
    let s2 = sigma * sigma;
    let rows: Vec<([f64; 2], f64)> = ws
        .iter()
        .map(|&w| {
            let v = s2 / (1.0 - w * w);
            let r = v.sqrt();
            ([r * v * w, r * v], r * w)
        })
        .collect();
    let worst = |a: [f64; 2]| rows.iter().map(|(c, b)| (c[0] * a[0] + c[1] * a[1] - b).abs()).fold(0.0, f64::max);
    let mut best = f64::INFINITY;
    let k = rows.len();
    // Pairs: exact intersection of two root lines.
    for i in 0..k {
        for j in i + 1..k {
            let (ci, bi) = rows[i];
            let (cj, bj) = rows[j];
            let det = ci[0] * cj[1] - ci[1] * cj[0];
            if det.abs() > 1e-14 {
                let a = [(bi * cj[1] - ci[1] * bj) / det, (ci[0] * bj - cj[0] * bi) / det];
                best = best.min(worst(a));
            }
        }
    }
    for i in 0..k {
        for j in i + 1..k {
            for l in j + 1..k {
                for signs in [[1.0, 1.0, -1.0], [1.0, -1.0, 1.0], [-1.0, 1.0, 1.0], [1.0, 1.0, 1.0]] {
                    let idx = [i, j, l];
                    let m = Matrix3::from_fn(|r, c| if c < 2 { rows[idx[r]].0[c] } else { -signs[r] });
                    let rhs = Vector3::from_fn(|r, _| rows[idx[r]].1);
                    if let Some(sol) = m.lu().solve(&rhs) {
                        best = best.min(worst([sol[0], sol[1]]));
                    }
                }
            }
        }
    }
    if k == 1 {
        best = 0.0;
    }
    best * best
}

/// Direct `(1/t) Σ_{i<t} x_i x_iᵀ` and `(1/t) Σ_{i<t} x_{i+1} x_iᵀ`.
pub fn direct_moments(states: &[DVector<f64>], t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = states[0].len();
    let mut x = DMatrix::zeros(d, d);
    let mut c = DMatrix::zeros(d, d);
    for i in 0..t {
        x += &states[i] * states[i].transpose();
        c += &states[i + 1] * states[i].transpose();
    }
    (x / t as f64, c / t as f64)
}

/// `(1/t Σ x_{i+1} x_iᵀ) z_{t,L}` with `z` from `L` Richardson steps on `X_t z = x_t`.
pub fn richardson_prediction(states: &[DVector<f64>], t: usize, alpha: f64, depth: usize) -> DVector<f64> {
    let (x, c) = direct_moments(states, t);
    let b = &states[t];
    let mut z = DVector::zeros(b.len());
    for _ in 0..depth {
        z = &z + (b - &x * &z) * alpha;
    }
    c * z
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
