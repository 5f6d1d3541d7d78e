//! Single-layer losses by simulation against the limiting formula, and training.

use lds_icl::lds::SystemParams;
use lds_icl::lower_bound::{grid_sup_minmax, uniform_grid};
use lds_icl::single_layer::{
    alpha_map, individual_loss_mc, limiting_loss, train_single_layer, SingleLayerParams, TrainConfig,
};

fn scalar_system(horizon: usize) -> SystemParams {
    SystemParams::new(1, 1.0, 0.1, 0.8, horizon).unwrap()
}

#[test]
fn root_parameters_nearly_solve_one_task() {
    // α₂ v = w at w = 0.5, so the limiting loss is exactly zero.
    let params = SingleLayerParams::new([1.0, 0.0], [0.375, 0.0]);
    assert!(limiting_loss(&alpha_map(&params), 0.5, 1.0).abs() < 1e-15);
    let est = individual_loss_mc(&params, 0.5, &scalar_system(2000), 4000, 1).unwrap();
    assert!(est.mean <= 0.02, "{est:?}");
}

#[test]
fn long_horizon_loss_approaches_limit() {
    let params = SingleLayerParams::new([0.8, -0.3], [0.2, 0.5]);
    let alphas = alpha_map(&params);
    let sys = scalar_system(4000);
    let mut worst_gap = 0.0f64;
    let mut worst_se = 0.0f64;
    for (k, &w) in [0.1, 0.3, 0.5, 0.7].iter().enumerate() {
        let est = individual_loss_mc(&params, w, &sys, 20_000, 100 + k as u64).unwrap();
        worst_gap = worst_gap.max((est.mean - limiting_loss(&alphas, w, 1.0)).abs());
        worst_se = worst_se.max(est.se);
    }
    assert!(worst_gap <= 3.0 * worst_se, "gap {worst_gap} vs se {worst_se}");
}

#[test]
fn training_on_one_task_drives_loss_down() {
    let cfg = TrainConfig { seed: 4, ..TrainConfig::default() };
    let trace = train_single_layer(&scalar_system(200), &[0.5], &cfg).unwrap();
    assert!(!trace.diverged);
    let tail = trace.tail_loss(200);
    assert!(tail <= 0.05, "tail loss {tail}");
    assert!(tail < trace.rows[0].loss);
}

#[test]
fn training_on_a_task_grid_stays_above_the_bound() {
    let grid = uniform_grid(0.1, 0.8, 8);
    let c = grid_sup_minmax(1.0, 0.1, 0.8, 8).unwrap().c_value;
    let cfg = TrainConfig { seed: 5, ..TrainConfig::default() };
    let sys = scalar_system(400);
    let trace = train_single_layer(&sys, &grid, &cfg).unwrap();
    assert!(!trace.diverged);
    assert!(trace.tail_loss(200) >= 0.5 * c, "{} vs {c}", trace.tail_loss(200));

    let alphas = alpha_map(&trace.final_params);
    let limit_worst = grid.iter().map(|&w| limiting_loss(&alphas, w, 1.0)).fold(0.0, f64::max);
    assert!(limit_worst >= c - 1e-12);
    let mc_worst = grid
        .iter()
        .enumerate()
        .map(|(k, &w)| individual_loss_mc(&trace.final_params, w, &scalar_system(2000), 4000, k as u64).unwrap().mean)
        .fold(0.0, f64::max);
    assert!(mc_worst >= 0.5 * c, "{mc_worst} vs {c}");
}

#[test]
fn reported_parameters_respect_the_radius() {
    let cfg = TrainConfig { lr: 0.5, epochs: 50, radius: 0.7, seed: 6, ..TrainConfig::default() };
    let trace = train_single_layer(&scalar_system(100), &[0.3, 0.6], &cfg).unwrap();
    for row in &trace.rows {
        let norm = |v: [f64; 2]| v[0].hypot(v[1]);
        assert!(norm(row.params.p) <= 0.7 + 1e-12 && norm(row.params.q) <= 0.7 + 1e-12);
    }
}
