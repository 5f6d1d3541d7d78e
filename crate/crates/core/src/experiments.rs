//! Seeded experiment drivers that produce CSV tables.
//!
//! Every table is a pure function of the effective [`ExperimentConfig`]: Monte-Carlo
//! seeds are derived from the config seed, the experiment stage and the task,
//! never from the wall clock or from scheduling order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lds::{rng_from_seed, sample_task, simulate, simulate_into, SystemParams, TaskMatrix, TaskMode};
use crate::lower_bound::{three_point_minmax, uniform_grid};
use crate::mc::{self, LossEstimate};
use crate::moments::{
    chain_covariance, fourth_moment_limits, fourth_moment_sum_closed_form, fourth_moment_sums_oracle,
    sixth_moment_limits, sixth_moment_sums_oracle,
};
use crate::richardson::{assemble_construction, proof_schedule, RichardsonSchedule};
use crate::single_layer::{individual_loss_mc, train_single_layer, SingleLayerParams, TrainConfig, TrainingTrace};
use crate::transformer::{CompiledStack, TokenBatch, TransformerStack};

/// Interval endpoint used in place of `w_min = 0`, which the limiting loss excludes.
pub const ZERO_ENDPOINT_SHIFT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    #[serde(default = "default_system")]
    pub system: SystemParams,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub moments: MomentsConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_system() -> SystemParams {
    SystemParams { d: 1, sigma: 1.0, w_min: 0.1, w_max: 0.8, horizon: 2000 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    #[serde(rename = "T_list")]
    pub t_list: Vec<usize>,
    /// Richardson depths; one entry applies to every `T`, otherwise one per `T`.
    /// Absent means the proof depth.
    #[serde(rename = "L_list", skip_serializing_if = "Option::is_none")]
    pub l_list: Option<Vec<usize>>,
    pub depth_kappa: f64,
    /// Step size override; absent means the proof step size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Uniform task grid size for `d = 1`.
    pub task_grid_n: usize,
    /// Random dense tasks added to the two extreme diagonal ones for `d > 1`.
    pub n_sampled_tasks: usize,
    /// Extra Richardson layers for the second deep row of the depth comparison.
    pub extra_depth: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            t_list: vec![50, 100, 200, 400, 800, 1600],
            l_list: None,
            depth_kappa: 1.0,
            alpha: None,
            task_grid_n: 15,
            n_sampled_tasks: 200,
            extra_depth: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub n_traj: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_traj: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<SingleLayerParams>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { lr: t.lr, epochs: t.epochs, batch: t.batch, radius: t.radius, init: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsConfig {
    pub w_list: Vec<f64>,
    /// Horizons for the exact fourth-moment sum comparison.
    pub t_list: Vec<usize>,
    /// Horizon for the normalized fourth-moment limits.
    pub limit_t4: usize,
    /// Horizon for the normalized sixth-moment limits.
    pub limit_t6: usize,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self { w_list: vec![0.2, 0.5, 0.8], t_list: (2..=30).collect(), limit_t4: 3000, limit_t6: 400 }
    }
}

impl Default for ExperimentConfig {
    /// `d = 1`, `σ = 1`, tasks in `[0.1, 0.8]`, `T = 2000`, seed 0.
    fn default() -> Self {
        Self::new(default_system(), 0)
    }
}

impl ExperimentConfig {
    pub fn new(system: SystemParams, seed: u64) -> Self {
        Self {
            experiment: None,
            system,
            sweep: SweepConfig::default(),
            mc: McConfig::default(),
            train: TrainSection::default(),
            moments: MomentsConfig::default(),
            seed,
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Replaces `w_min = 0` by [`ZERO_ENDPOINT_SHIFT`].
    pub fn normalize(&mut self) {
        if self.system.w_min == 0.0 {
            self.system.w_min = ZERO_ENDPOINT_SHIFT;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.mc.n_traj < 2 {
            return Err(Error::Config("mc.n_traj must be at least 2".into()));
        }
        if !(self.sweep.depth_kappa >= 0.0 && self.sweep.depth_kappa.is_finite()) {
            return Err(Error::Config("sweep.depth_kappa must be nonnegative".into()));
        }
        if let Some(a) = self.sweep.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("sweep.alpha must be positive, got {a}")));
            }
        }
        if self.system.d == 1 && self.sweep.task_grid_n == 0 {
            return Err(Error::Config("sweep.task_grid_n must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output path.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(&Self { out: None, ..self.clone() }).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_sha256: self.sha256(), seed: self.seed, version: env!("CARGO_PKG_VERSION") }
    }

    fn schedule(&self, sys: &SystemParams, depth: Option<usize>) -> Result<RichardsonSchedule> {
        let mut sched = proof_schedule(sys, self.sweep.depth_kappa)?;
        if let Some(a) = self.sweep.alpha {
            sched.alpha = a;
        }
        if let Some(l) = depth {
            sched.depth = l;
        }
        Ok(sched)
    }

    fn depth_for(&self, k: usize) -> Result<Option<usize>> {
        match self.sweep.l_list.as_deref() {
            None => Ok(None),
            Some([l]) => Ok(Some(*l)),
            Some(ls) if ls.len() == self.sweep.t_list.len() => Ok(Some(ls[k])),
            Some(ls) => Err(Error::Config(format!(
                "sweep.L_list has {} entries for {} horizons",
                ls.len(),
                self.sweep.t_list.len()
            ))),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for one Monte-Carlo cell, keyed by the config seed and `tags`.
pub fn keyed_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

const STAGE_DEEP: u64 = 1;
const STAGE_SINGLE_EVAL: u64 = 2;
const STAGE_TRAIN: u64 = 3;
const STAGE_TASKS: u64 = 4;
const STAGE_SIMULATE: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub version: &'static str,
}

/// Formats with 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Set when a trainer run was aborted for divergence.
    pub diverged: bool,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new(), diverged: false }
    }

    /// Provenance comment, header row, then the rows; LF line endings.
    pub fn write_csv<W: Write>(&self, mut out: W, prov: &Provenance) -> Result<()> {
        writeln!(out, "# config_sha256={} seed={} version={}", prov.config_sha256, prov.seed, prov.version)?;
        writeln!(out, "{}", self.header.join(","))?;
        for row in &self.rows {
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, prov: &Provenance) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, prov).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// A task together with the tag its Monte-Carlo seeds are keyed by.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTask {
    pub task: TaskMatrix,
    pub tag: u64,
}

/// Finite proxy for the task set: a uniform grid for `d = 1`; for `d > 1`
/// the diagonal tasks `w_min I`, `w_max I` plus `n_sampled` random dense tasks.
pub fn task_grid(sys: &SystemParams, grid_n: usize, n_sampled: usize, seed: u64) -> Result<Vec<GridTask>> {
    sys.validate()?;
    if sys.d == 1 {
        return Ok(uniform_grid(sys.w_min, sys.w_max, grid_n)
            .into_iter()
            .map(|w| GridTask { task: TaskMatrix::scalar(w), tag: w.to_bits() })
            .collect());
    }
    let mut tasks = vec![
        GridTask { task: TaskMatrix::diagonal(&vec![sys.w_min; sys.d]), tag: 0 },
        GridTask { task: TaskMatrix::diagonal(&vec![sys.w_max; sys.d]), tag: 1 },
    ];
    let mut rng = rng_from_seed(keyed_seed(seed, &[STAGE_TASKS]));
    for k in 0..n_sampled {
        tasks.push(GridTask { task: sample_task(sys, TaskMode::Dense, &mut rng)?, tag: 2 + k as u64 });
    }
    Ok(tasks)
}

/// Monte-Carlo estimate of `E‖ŷ_T − W x_T‖²` for `stack` on fresh
/// trajectories of `task`.
pub fn stack_loss_mc(
    stack: &TransformerStack,
    task: &TaskMatrix,
    sigma: f64,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<LossEstimate> {
    stack.validate()?;
    if task.dim() != stack.d {
        return Err(Error::DimensionMismatch { expected: stack.d, actual: task.dim() });
    }
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let compiled = CompiledStack::new(stack);
    let d = stack.d;
    Ok(mc::estimate(n, seed, |rng, m, acc| {
        let mut batch = TokenBatch::zeros(d, horizon, m);
        let mut states = vec![0.0; (horizon + 1) * d];
        let mut targets = Vec::with_capacity(m * d);
        for b in 0..m {
            simulate_into(task, sigma, &mut states, rng);
            batch.embed_states(b, &states);
            let last = &states[horizon * d..];
            targets.extend((0..d).map(|i| (0..d).map(|j| task.matrix[(i, j)] * last[j]).sum::<f64>()));
        }
        let out = compiled.run(batch);
        for b in 0..m {
            let pred = out.prediction(b, horizon);
            acc.push(pred.iter().zip(&targets[b * d..(b + 1) * d]).map(|(p, t)| (p - t).powi(2)).sum());
        }
    }))
}

/// Worst and average estimate over a task grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLoss {
    pub worst: LossEstimate,
    pub mean: f64,
}

fn grid_loss(estimates: impl IntoIterator<Item = Result<LossEstimate>>) -> Result<GridLoss> {
    let mut worst: Option<LossEstimate> = None;
    let (mut sum, mut count) = (0.0, 0usize);
    for est in estimates {
        let est = est?;
        sum += est.mean;
        count += 1;
        if worst.is_none_or(|w| est.mean > w.mean) {
            worst = Some(est);
        }
    }
    let worst = worst.ok_or(Error::Empty("task grid"))?;
    Ok(GridLoss { worst, mean: sum / count as f64 })
}

/// Test loss of the constructed stack at every `T` of the sweep.
///
/// Columns: `T, L, alpha, mean_loss, se, n` for the worst task of the grid,
/// then `grid_mean_loss`, the loss averaged over the grid.
pub fn run_decay_sweep(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    if cfg.sweep.t_list.is_empty() {
        return Err(Error::Config("sweep.T_list is empty".into()));
    }
    let mut table = Table::new(&["T", "L", "alpha", "mean_loss", "se", "n", "grid_mean_loss"]);
    let tasks = task_grid(&cfg.system, cfg.sweep.task_grid_n, cfg.sweep.n_sampled_tasks, cfg.seed)?;
    for (k, &horizon) in cfg.sweep.t_list.iter().enumerate() {
        let sys = cfg.system.with_horizon(horizon);
        let sched = cfg.schedule(&sys, cfg.depth_for(k)?)?;
        let stack = assemble_construction(&sys, &sched)?;
        let loss = grid_loss(tasks.iter().map(|g| {
            let seed = keyed_seed(cfg.seed, &[STAGE_DEEP, horizon as u64, g.tag]);
            stack_loss_mc(&stack, &g.task, sys.sigma, horizon, cfg.mc.n_traj, seed)
        }))?;
        table.rows.push(vec![
            horizon.to_string(),
            sched.depth.to_string(),
            num(sched.alpha),
            num(loss.worst.mean),
            num(loss.worst.se),
            loss.worst.n.to_string(),
            num(loss.mean),
        ]);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSeparationReport {
    pub table: Table,
    pub trace: TrainingTrace,
    /// The three-point min-max value for `{w_min, (w_min+w_max)/2, w_max}`.
    pub c_value: f64,
}

/// Single layer (trained) against the constructed deep stack at `T = system.T`.
///
/// Rows, all evaluated on the same trajectories per task:
/// `single_layer_init` (trainer starting point), `single_layer` (trained),
/// `deep` at the scheduled depth and at `extra_depth` more Richardson layers.
/// Columns: `model, T, depth, loss, se, mean_loss, C, diverged`, with `loss`
/// the worst task and `depth` the number of layers.
pub fn run_depth_separation(cfg: &ExperimentConfig) -> Result<DepthSeparationReport> {
    cfg.validate()?;
    let sys = cfg.system;
    if sys.d != 1 {
        return Err(Error::Config("depth separation is defined for d = 1".into()));
    }
    let horizon = sys.horizon;
    let grid = uniform_grid(sys.w_min, sys.w_max, cfg.sweep.task_grid_n);
    let c_value = three_point_minmax(sys.sigma, &[sys.w_min, (sys.w_min + sys.w_max) / 2.0, sys.w_max])?.c_value;

    let train = TrainConfig {
        lr: cfg.train.lr,
        epochs: cfg.train.epochs,
        batch: cfg.train.batch,
        radius: cfg.train.radius,
        seed: keyed_seed(cfg.seed, &[STAGE_TRAIN]),
        init: cfg.train.init,
    };
    let trace = train_single_layer(&sys, &grid, &train)?;
    let init = trace.rows.first().map(|r| r.params).unwrap_or(trace.final_params);

    let mut table = Table::new(&["model", "T", "depth", "loss", "se", "mean_loss", "C", "diverged"]);
    table.diverged = trace.diverged;
    let push = |table: &mut Table, model: &str, depth: usize, loss: GridLoss, diverged: bool| {
        table.rows.push(vec![
            model.to_string(),
            horizon.to_string(),
            depth.to_string(),
            num(loss.worst.mean),
            num(loss.worst.se),
            num(loss.mean),
            num(c_value),
            diverged.to_string(),
        ]);
    };

    let single = |params: &SingleLayerParams| {
        grid_loss(grid.iter().map(|&w| {
            let seed = keyed_seed(cfg.seed, &[STAGE_SINGLE_EVAL, horizon as u64, w.to_bits()]);
            individual_loss_mc(params, w, &sys, cfg.mc.n_traj, seed)
        }))
    };
    push(&mut table, "single_layer_init", 1, single(&init)?, false);
    push(&mut table, "single_layer", 1, single(&trace.final_params)?, trace.diverged);

    let sched = cfg.schedule(&sys, cfg.sweep.l_list.as_ref().and_then(|l| l.first().copied()))?;
    for extra in [0, cfg.sweep.extra_depth] {
        let sched = RichardsonSchedule { depth: sched.depth + extra, ..sched };
        let stack = assemble_construction(&sys, &sched)?;
        let loss = grid_loss(grid.iter().map(|&w| {
            let seed = keyed_seed(cfg.seed, &[STAGE_DEEP, horizon as u64, w.to_bits()]);
            stack_loss_mc(&stack, &TaskMatrix::scalar(w), sys.sigma, horizon, cfg.mc.n_traj, seed)
        }))?;
        push(&mut table, "deep", stack.depth(), loss, false);
    }
    Ok(DepthSeparationReport { table, trace, c_value })
}

fn rel_err(closed: f64, oracle: f64) -> f64 {
    (closed - oracle).abs() / oracle.abs()
}

/// Closed-form moment identities against the Isserlis oracle.
///
/// Columns: `identity, w, sigma, t, closed_form, oracle, rel_err`. The limit
/// rows compare the stated limit with the oracle sum normalized at `t`.
pub fn run_moment_audit(cfg: &ExperimentConfig) -> Result<Table> {
    let m = &cfg.moments;
    let sigma = cfg.system.sigma;
    let mut table = Table::new(&["identity", "w", "sigma", "t", "closed_form", "oracle", "rel_err"]);
    let push = |table: &mut Table, id: &str, w: f64, t: usize, closed: f64, oracle: f64| {
        table.rows.push(vec![
            id.to_string(),
            num(w),
            num(sigma),
            t.to_string(),
            num(closed),
            num(oracle),
            num(rel_err(closed, oracle)),
        ]);
    };
    for &w in &m.w_list {
        let t_max = m.t_list.iter().copied().chain([m.limit_t4, m.limit_t6]).max().unwrap_or(0);
        let cov = chain_covariance(w, sigma, t_max)?;
        for &t in &m.t_list {
            let (oracle, _, _) = fourth_moment_sums_oracle(&cov, t)?;
            push(&mut table, "fourth_sum", w, t, fourth_moment_sum_closed_form(w, sigma, t), oracle);
        }
        if m.limit_t4 > 0 {
            let t = m.limit_t4;
            let (cross, sq, _) = fourth_moment_sums_oracle(&cov, t)?;
            let (lim_cross, lim_sq) = fourth_moment_limits(w, sigma);
            push(&mut table, "fourth_limit_cross", w, t, lim_cross, cross / t as f64);
            push(&mut table, "fourth_limit_square", w, t, lim_sq, sq / t as f64);
        }
        if m.limit_t6 > 0 {
            let t = m.limit_t6;
            let cov6 = chain_covariance(w, sigma, t)?;
            let (a, b, ab) = sixth_moment_sums_oracle(&cov6, t)?;
            let (la, lb, lab) = sixth_moment_limits(w, sigma);
            let n2 = (t * t) as f64;
            push(&mut table, "sixth_limit_cross_sq", w, t, la, a / n2);
            push(&mut table, "sixth_limit_lag_sq", w, t, lb, b / n2);
            push(&mut table, "sixth_limit_mixed", w, t, lab, ab / n2);
        }
    }
    Ok(table)
}

/// One trajectory of a task drawn from the configured task distribution.
/// Columns: `t, x0, …, x{d-1}`.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.system.validate()?;
    let sys = cfg.system;
    let mut rng = rng_from_seed(keyed_seed(cfg.seed, &[STAGE_SIMULATE, 0]));
    let task = sample_task(&sys, TaskMode::Dense, &mut rng)?;
    let traj = simulate(&sys, &task, keyed_seed(cfg.seed, &[STAGE_SIMULATE, 1]))?;
    let header: Vec<String> = std::iter::once("t".to_string()).chain((0..sys.d).map(|i| format!("x{i}"))).collect();
    let rows = traj
        .states
        .iter()
        .enumerate()
        .map(|(t, x)| std::iter::once(t.to_string()).chain(x.iter().map(|&v| num(v))).collect())
        .collect();
    Ok(Table { header, rows, diverged: false })
}
