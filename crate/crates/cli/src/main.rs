//! `tpest`: runs simulation, estimation, turnpike and performance studies
//! and writes their tables to an output directory.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use turnpike_estimation::experiment::{write_manifest, Experiment, ExperimentConfig, Manifest, RunRecord};
use turnpike_estimation::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "tpest", version, about = "State estimation and turnpike experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `motivating`, `batch_reactor`, or a scenario JSON file.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Horizon T of the record.
    #[arg(long, short = 'T', global = true)]
    horizon: Option<usize>,
    /// Comma-separated window lengths for scans and comparisons.
    #[arg(long, global = true, value_delimiter = ',')]
    lens: Option<Vec<usize>>,
    /// Comma-separated window starts for scans; `end` means T − N.
    #[arg(long, global = true, value_delimiter = ',')]
    taus: Option<Vec<String>>,
    /// Measurement CSV to use instead of a simulation.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores, 1 = serial).
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[arg(long, global = true)]
    tol_kkt: Option<f64>,
    #[arg(long, global = true)]
    tol_feas: Option<f64>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Multiplies the default horizon and window lengths.
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Disables the window-solve cache.
    #[arg(long, global = true)]
    no_cache: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the measurement record and the true trajectory.
    Simulate,
    /// Full-information estimate over the whole record.
    SolveFie,
    /// One truncated window, optionally with pinned endpoints.
    SolveWindow {
        #[arg(long)]
        tau: usize,
        #[arg(long = "N", short = 'N')]
        len: usize,
        /// Comma-separated initial state to impose.
        #[arg(long = "pin-init", value_delimiter = ',', allow_hyphen_values = true)]
        pin_initial: Option<Vec<f64>>,
        /// Comma-separated terminal state to impose.
        #[arg(long = "pin-term", value_delimiter = ',', allow_hyphen_values = true)]
        pin_terminal: Option<Vec<f64>>,
    },
    /// Approximate estimator stitched from windows of length N.
    Approx {
        #[arg(long = "N", short = 'N')]
        len: usize,
    },
    /// Moving-horizon estimator with window length N.
    Mhe {
        #[arg(long = "N", short = 'N')]
        len: usize,
    },
    /// Gap profiles of windows against the full-information estimate.
    TurnpikeScan,
    /// Response of a pinned window to a shift of its endpoints.
    SensitivityProbe {
        #[arg(long)]
        tau: usize,
        #[arg(long = "N", short = 'N')]
        len: usize,
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        delta_initial: f64,
        #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
        delta_terminal: f64,
    },
    /// Approximate and moving-horizon estimators for every window length.
    Compare,
    /// Cost gap, accuracy and bounds of an estimate CSV.
    PerfReport {
        #[arg(long)]
        candidate: PathBuf,
        /// Window length whose envelope supplies the bounds.
        #[arg(long = "N", short = 'N')]
        len: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveFie => "solve-fie",
            Command::SolveWindow { .. } => "solve-window",
            Command::Approx { .. } => "approx",
            Command::Mhe { .. } => "mhe",
            Command::TurnpikeScan => "turnpike-scan",
            Command::SensitivityProbe { .. } => "sensitivity-probe",
            Command::Compare => "compare",
            Command::PerfReport { .. } => "perf-report",
        }
    }

    fn run(&self, exp: &Experiment) -> turnpike_estimation::Result<RunRecord> {
        match self {
            Command::Simulate => exp.run_simulate(),
            Command::SolveFie => exp.run_fie(),
            Command::SolveWindow { tau, len, pin_initial, pin_terminal } => {
                exp.run_window(*tau, *len, pin_initial.clone(), pin_terminal.clone())
            }
            Command::Approx { len } => exp.run_approx(*len),
            Command::Mhe { len } => exp.run_mhe(*len),
            Command::TurnpikeScan => exp.run_scan(),
            Command::SensitivityProbe { tau, len, delta_initial, delta_terminal } => {
                exp.run_probe(*tau, *len, *delta_initial, *delta_terminal)
            }
            Command::Compare => exp.run_compare(),
            Command::PerfReport { candidate, len } => exp.run_perf_report(candidate, *len),
        }
    }
}

fn build_config(g: &Global) -> turnpike_estimation::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &g.scenario {
        cfg.scenario = s.clone();
    }
    if g.horizon.is_some() {
        cfg.horizon = g.horizon;
    }
    if let Some(l) = &g.lens {
        cfg.horizons = Some(l.clone());
    }
    if let Some(t) = &g.taus {
        let taus = t
            .iter()
            .map(|s| match s.trim() {
                "end" => Ok(None),
                v => v.parse().map(Some).map_err(|_| Error::Config(format!("bad tau {v:?}"))),
            })
            .collect::<turnpike_estimation::Result<Vec<_>>>()?;
        cfg.taus = Some(taus);
    }
    if g.data.is_some() {
        cfg.data = g.data.clone();
    }
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(p) = g.parallel {
        cfg.parallel = p;
    }
    if let Some(v) = g.tol_kkt {
        cfg.tol.tol_kkt = v;
    }
    if let Some(v) = g.tol_feas {
        cfg.tol.tol_feas = v;
    }
    if let Some(v) = g.max_iter {
        cfg.tol.max_iter = v;
    }
    if let Some(v) = g.scale {
        cfg.scale = v;
    }
    if g.no_cache {
        cfg.cache = false;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_IO,
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Dimension(_)
        | Error::Length(_)
        | Error::NotAdditive(_) => EXIT_CONFIG,
        _ => EXIT_SOLVER,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = match build_config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let exp = match Experiment::new(config.clone()) {
        Ok(x) => x,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let command = cli.command.name();
    info!("{command}: T = {}, output in {}", exp.horizon(), config.out.display());
    let result = cli.command.run(&exp);
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        started_unix_s,
        wall_time_s: clock.elapsed().as_secs_f64(),
        ok: result.is_ok(),
        error: result.as_ref().err().map(|e| e.to_string()),
        config: config.clone(),
        scenario: Some(exp.scenario.to_doc()),
        record: result.as_ref().cloned().unwrap_or_default(),
    };
    if let Err(e) = write_manifest(&config.out, &manifest) {
        error!("cannot write manifest: {e}");
        return ExitCode::from(EXIT_IO);
    }
    match result {
        Ok(record) => {
            let failed = record.cells.iter().filter(|c| !c.ok).count();
            if failed > 0 {
                info!("{failed} of {} cells failed; see manifest.json", record.cells.len());
            }
            info!("wrote {}", record.files.join(", "));
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
