use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lds_icl::experiments::{
    run_decay_sweep, run_depth_separation, run_moment_audit, run_simulate, ExperimentConfig, Provenance, Table,
    ZERO_ENDPOINT_SHIFT,
};
use lds_icl::lower_bound::{append_ledger_row, grid_sup_minmax, rank_inconsistency_check};
use lds_icl::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Experiments on in-context learning of noisy linear dynamical systems.
#[derive(Parser)]
#[command(name = "lds-icl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test loss of the Richardson construction across horizons.
    Decay {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Comma-separated horizons, e.g. 50,100,200.
        #[arg(long, value_delimiter = ',')]
        t_list: Option<Vec<usize>>,
    },
    /// Trained single layer against the constructed deep stack.
    DepthSep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Norm cap for p and q.
        #[arg(long)]
        radius: Option<f64>,
        /// Where to write the training trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Closed-form moment identities against the Isserlis oracle.
    Moments {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated chain coefficients.
        #[arg(long, value_delimiter = ',')]
        w_list: Option<Vec<f64>>,
    },
    /// Min-max value of the single-layer limiting loss.
    LowerBound {
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.1)]
        wmin: f64,
        #[arg(long, default_value_t = 0.8)]
        wmax: f64,
        /// Number of uniformly spaced tasks; 3 gives the three-point bound.
        #[arg(long, default_value_t = 3)]
        grid_n: usize,
        /// JSON output (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV ledger the result is appended to.
        #[arg(long, default_value = "lower_bound_ledger.csv")]
        ledger: PathBuf,
    },
    /// Dump one simulated trajectory.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    wmin: Option<f64>,
    #[arg(long)]
    wmax: Option<f64>,
    /// Horizon T.
    #[arg(long = "T", alias = "horizon")]
    horizon: Option<usize>,
    #[arg(long)]
    n_traj: Option<usize>,
    /// Task grid size for d = 1.
    #[arg(long)]
    grid_n: Option<usize>,
    /// CSV output (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    alpha: Option<f64>,
    /// Richardson depth L, applied at every horizon.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
}

impl CommonArgs {
    fn config(&self) -> lds_icl::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let sys = &mut cfg.system;
        set(&mut cfg.seed, self.seed);
        set(&mut sys.d, self.d);
        set(&mut sys.sigma, self.sigma);
        set(&mut sys.w_min, self.wmin);
        set(&mut sys.w_max, self.wmax);
        set(&mut sys.horizon, self.horizon);
        set(&mut cfg.mc.n_traj, self.n_traj);
        set(&mut cfg.sweep.task_grid_n, self.grid_n);
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if cfg.system.w_min == 0.0 {
            eprintln!("note: w_min = 0 is excluded, using {ZERO_ENDPOINT_SHIFT}");
        }
        cfg.normalize();
        Ok(cfg)
    }
}

impl ScheduleArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.alpha.is_some() {
            cfg.sweep.alpha = self.alpha;
        }
        if let Some(l) = self.depth {
            cfg.sweep.l_list = Some(vec![l]);
        }
        set(&mut cfg.sweep.depth_kappa, self.kappa);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn open_out(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(table: &Table, prov: &Provenance, path: Option<&Path>) -> lds_icl::Result<()> {
    let mut out = open_out(path)?;
    table.write_csv(&mut out, prov)?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> lds_icl::Result<ExitCode> {
    match cli.command {
        Command::Decay { common, schedule, t_list } => {
            let mut cfg = common.config()?;
            schedule.apply(&mut cfg);
            set(&mut cfg.sweep.t_list, t_list);
            let table = run_decay_sweep(&cfg)?;
            emit(&table, &cfg.provenance(), cfg.out.as_deref())?;
        }
        Command::DepthSep { common, schedule, lr, epochs, batch, radius, trace } => {
            let mut cfg = common.config()?;
            schedule.apply(&mut cfg);
            set(&mut cfg.train.lr, lr);
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.batch, batch);
            set(&mut cfg.train.radius, radius);
            let report = run_depth_separation(&cfg)?;
            emit(&report.table, &cfg.provenance(), cfg.out.as_deref())?;
            if let Some(path) = trace {
                let mut out = open_out(Some(&path))?;
                report.trace.write_csv(&mut out)?;
                out.flush()?;
            }
            if report.table.diverged {
                eprintln!("training diverged");
                return Ok(ExitCode::from(EXIT_DIVERGED));
            }
        }
        Command::Moments { common, w_list } => {
            let mut cfg = common.config()?;
            set(&mut cfg.moments.w_list, w_list);
            let table = run_moment_audit(&cfg)?;
            emit(&table, &cfg.provenance(), cfg.out.as_deref())?;
        }
        Command::LowerBound { sigma, wmin, wmax, grid_n, out, ledger } => {
            let wmin = if wmin == 0.0 {
                eprintln!("note: w_min = 0 is excluded, using {ZERO_ENDPOINT_SHIFT}");
                ZERO_ENDPOINT_SHIFT
            } else {
                wmin
            };
            let result = grid_sup_minmax(sigma, wmin, wmax, grid_n)?;
            let ranks = rank_inconsistency_check(sigma, &[wmin, (wmin + wmax) / 2.0, wmax])?;
            let json = serde_json::json!({ "result": result, "rank_check": ranks });
            let mut w = open_out(out.as_deref())?;
            writeln!(w, "{}", serde_json::to_string_pretty(&json)?)?;
            w.flush()?;
            let fresh = fs::metadata(&ledger).map(|m| m.len() == 0).unwrap_or(true);
            let mut file = OpenOptions::new().create(true).append(true).open(&ledger)?;
            append_ledger_row(&mut file, &result, fresh)?;
        }
        Command::Simulate { common } => {
            let cfg = common.config()?;
            let table = run_simulate(&cfg)?;
            emit(&table, &cfg.provenance(), cfg.out.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) => ExitCode::FAILURE,
                _ => ExitCode::from(EXIT_VALIDATION),
            }
        }
    }
}
