//! Experiment configuration and the runners behind the command-line tool.
//!
//! An [`Experiment`] resolves a configuration into a scenario, a data
//! record and an estimation setup. Each `run_*` method writes its tables
//! into the output directory and returns a [`RunRecord`] listing the files
//! and the status of every cell. Solver failures inside scans and
//! comparisons are recorded as data; single-solve runs return them as
//! errors. Only the manifest carries timings, so every other file is a
//! deterministic function of the configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cost::{CostWeights, EstimateTrajectory, WeightsDoc};
use crate::error::{Error, Result};
use crate::estimators::{
    approximate_estimator, fie_reference, mhe_sequence, solve_windows, write_estimate_csv, ApproxEstimate,
    EstimationSetup, MheEstimate, Source, WindowCache, WindowSolution,
};
use crate::performance::{
    averaged_bound, lemma4_constants, perf_report, sigma1, theorem4_bound, write_summary_csv, BoundConstants,
    PerfReport, SummaryRow,
};
use crate::solver::{solve, SolveReport, ToleranceConfig};
use crate::system_model::{
    batch_reactor_scenario, motivating_scenario, simulate, DataBatch, Scenario, ScenarioDoc, Simulation,
};
use crate::turnpike::{
    arc_coefficients, excursion_count, fit_envelope, gap_profile, scan_grid, sensitivity_probe, turnpike_scan,
    write_profiles_csv, EnvelopeFit, GapProfile, PinPair, Side, SideSelector,
};

/// Slack values `ε` for the performance bounds.
pub const DEFAULT_EPSILONS: [f64; 3] = [0.1, 0.5, 1.0];

const MOTIVATING_HORIZON: usize = 70;
const MOTIVATING_LENS: [usize; 4] = [5, 10, 15, 20];
const REACTOR_HORIZON: usize = 400;
const REACTOR_LENS: [usize; 5] = [40, 70, 100, 130, 160];
const FILE_LENS: [usize; 2] = [10, 20];

/// Everything a run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `motivating`, `batch_reactor`, or the path of a scenario JSON file.
    pub scenario: String,
    /// Overrides the scenario horizon `T`.
    pub horizon: Option<usize>,
    /// Window lengths for scans and comparisons.
    pub horizons: Option<Vec<usize>>,
    /// Window starts for scans; `null` is the right-boundary window `T − N`.
    pub taus: Option<Vec<Option<usize>>>,
    pub weights: Option<WeightsDoc>,
    pub tol: ToleranceConfig,
    /// Random seed; `None` keeps the scenario's own.
    pub seed: Option<u64>,
    /// Reads measurements from this CSV instead of simulating.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Worker threads: `0` uses every core, `1` runs serially.
    pub parallel: usize,
    /// Multiplies the default `T` and the default window lengths.
    pub scale: f64,
    pub epsilons: Vec<f64>,
    /// `ε` of the bound column of the summary table.
    pub bound_epsilon: f64,
    /// Threshold of the excursion counts in scans.
    pub excursion_epsilon: f64,
    /// Memoize window solves within a run.
    pub cache: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "motivating".into(),
            horizon: None,
            horizons: None,
            taus: None,
            weights: None,
            tol: ToleranceConfig::default(),
            seed: None,
            data: None,
            out: PathBuf::from("out"),
            parallel: 0,
            scale: 1.0,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            bound_epsilon: 0.5,
            excursion_epsilon: 0.05,
            cache: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad("epsilons must be a non-empty list of positive numbers".into());
        }
        if !(self.bound_epsilon.is_finite() && self.bound_epsilon > 0.0) {
            return bad("bound_epsilon must be positive".into());
        }
        if !(self.excursion_epsilon >= 0.0) {
            return bad("excursion_epsilon must be non-negative".into());
        }
        let t = &self.tol;
        if !(t.tol_kkt > 0.0 && t.tol_feas > 0.0 && t.max_iter > 0) {
            return bad("tolerances and max_iter must be positive".into());
        }
        if !(t.mu_init > 0.0 && t.mu_factor > 0.0 && t.mu_factor < 1.0 && t.mu_min > 0.0) {
            return bad("barrier schedule needs mu_init > 0, 0 < mu_factor < 1, mu_min > 0".into());
        }
        if matches!(&self.horizons, Some(h) if h.is_empty() || h.contains(&0)) {
            return bad("horizons must be a non-empty list of positive lengths".into());
        }
        Ok(())
    }

    fn scaled(&self, v: usize) -> usize {
        ((v as f64 * self.scale).round() as usize).max(1)
    }

    /// Default window lengths, kept even once scaled.
    fn scaled_lens(&self, lens: &[usize]) -> Vec<usize> {
        if self.scale == 1.0 {
            return lens.to_vec();
        }
        let mut out: Vec<usize> =
            lens.iter().map(|&n| (((n as f64 * self.scale) / 2.0).round() as usize * 2).max(2)).collect();
        out.dedup();
        out
    }
}

/// Status of one unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub label: String,
    pub ok: bool,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

/// Files written by a run and the status of its cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub files: Vec<String>,
    pub cells: Vec<CellStatus>,
}

impl RunRecord {
    fn cell<T>(&mut self, label: impl Into<String>, started: Instant, result: &std::result::Result<T, String>) {
        self.cells.push(CellStatus {
            label: label.into(),
            ok: result.is_ok(),
            error: result.as_ref().err().cloned(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
}

/// Run metadata. The only output that depends on the clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub scenario: Option<ScenarioDoc>,
    pub record: RunRecord,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// A resolved configuration.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Scenario<f64>,
    pub setup: EstimationSetup<f64>,
    pub data: DataBatch<f64>,
    /// Simulated truth; `None` when the data came from a file.
    pub truth: Option<Simulation<f64>>,
    pub lens: Vec<usize>,
    pub taus: Vec<Option<usize>>,
    cache: Option<WindowCache<f64>>,
    pool: ThreadPool,
}

fn resolve_scenario(cfg: &ExperimentConfig) -> Result<(Scenario<f64>, Vec<usize>)> {
    let (mut scenario, lens) = match cfg.scenario.as_str() {
        "motivating" => {
            let t = cfg.horizon.unwrap_or_else(|| cfg.scaled(MOTIVATING_HORIZON));
            (motivating_scenario(t)?, cfg.scaled_lens(&MOTIVATING_LENS))
        }
        "batch_reactor" => {
            let t = cfg.horizon.unwrap_or_else(|| cfg.scaled(REACTOR_HORIZON));
            (batch_reactor_scenario(t, cfg.seed.unwrap_or(0))?, cfg.scaled_lens(&REACTOR_LENS))
        }
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read scenario {path}: {e}")))?;
            let mut doc: ScenarioDoc =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("scenario {path}: {e}")))?;
            if let Some(t) = cfg.horizon {
                doc.horizon = t;
            }
            (Scenario::from_doc(&doc)?, FILE_LENS.to_vec())
        }
    };
    if let Some(seed) = cfg.seed {
        scenario.seed = seed;
    }
    if let Some(w) = &cfg.weights {
        let weights = CostWeights::from_doc(w)?;
        if weights.disturbance_dim() != scenario.model.q() || weights.output_dim() != scenario.model.p() {
            return Err(Error::Config("weights do not match the model dimensions".into()));
        }
        scenario.weights = weights;
    }
    Ok((scenario, lens))
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) | Error::Io(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl Experiment {
    /// Resolves `config`; every failure here is a configuration error
    /// except unreadable data files, which stay I/O errors.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (mut scenario, default_lens) = resolve_scenario(&config).map_err(config_error)?;
        let (data, truth) = match &config.data {
            Some(path) => {
                let data = DataBatch::read_csv(File::open(path)?)?;
                if data.input_dim() != scenario.model.m() || data.output_dim() != scenario.model.p() {
                    return Err(Error::Config(format!("{} does not match the model dimensions", path.display())));
                }
                scenario.horizon = data.horizon();
                (data, None)
            }
            None => {
                let sim = simulate(&scenario, scenario.seed).map_err(config_error)?;
                (sim.data.clone(), Some(sim))
            }
        };
        let lens = config.horizons.clone().unwrap_or(default_lens);
        let taus = config
            .taus
            .clone()
            .unwrap_or_else(|| default_taus(data.horizon()));
        let setup = EstimationSetup::new(
            scenario.model.clone(),
            scenario.solve_sets.clone(),
            scenario.weights.clone(),
            config.tol,
        );
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let cache = config.cache.then(WindowCache::new);
        Ok(Self { config, scenario, setup, data, truth, lens, taus, cache, pool })
    }

    pub fn horizon(&self) -> usize {
        self.data.horizon()
    }

    fn parallel(&self) -> bool {
        self.pool.current_num_threads() > 1
    }

    fn out(&self) -> Result<Outputs> {
        fs::create_dir_all(&self.config.out)?;
        Ok(Outputs { dir: self.config.out.clone(), record: RunRecord::default() })
    }

    fn true_states(&self) -> Option<&[Vec<f64>]> {
        self.truth.as_ref().map(|s| s.states.as_slice())
    }

    fn fie(&self) -> Result<SolveReport<f64>> {
        self.pool.install(|| fie_reference(&self.data, &self.setup))
    }

    fn perf(&self, traj: &EstimateTrajectory<f64>, reference: &SolveReport<f64>) -> Result<PerfReport<f64>> {
        perf_report(traj, reference, &self.data, &self.setup.weights, &self.setup.model, self.true_states())
    }

    fn write_fie(&self, out: &mut Outputs, fie: &SolveReport<f64>) -> Result<()> {
        let q = self.setup.model.q();
        let sources: Vec<Source> = (0..=self.horizon()).map(|j| Source { tau: 0, offset: j }).collect();
        out.with("fie.csv", |w| write_estimate_csv(w, &fie.trajectory, &sources, q))
    }

    /// `data.csv`, `truth.csv` (when simulated) and `scenario.json`.
    pub fn run_simulate(&self) -> Result<RunRecord> {
        let mut out = self.out()?;
        out.with("data.csv", |w| self.data.write_csv(w))?;
        if let Some(sim) = &self.truth {
            out.with("truth.csv", |w| write_truth_csv(w, sim))?;
        }
        out.json("scenario.json", &self.scenario.to_doc())?;
        Ok(out.record)
    }

    /// Full-information estimate: `fie.csv` and `fie.json`.
    pub fn run_fie(&self) -> Result<RunRecord> {
        let mut out = self.out()?;
        let started = Instant::now();
        let fie = self.fie();
        out.record.cell("fie", started, &fie.as_ref().map_err(|e| e.to_string()));
        let fie = fie?;
        self.write_fie(&mut out, &fie)?;
        let sne = self.true_states().map(|t| crate::performance::sne(fie.trajectory.states(), t)).transpose()?;
        out.json("fie.json", &json!({ "report": fie.to_doc(), "sne": sne }))?;
        Ok(out.record)
    }

    /// One truncated or pinned window: `window.csv` and `window.json`.
    pub fn run_window(
        &self,
        tau: usize,
        len: usize,
        pin_initial: Option<Vec<f64>>,
        pin_terminal: Option<Vec<f64>>,
    ) -> Result<RunRecord> {
        let mut out = self.out()?;
        let started = Instant::now();
        let result = self.data.window(tau, len).and_then(|d| {
            let spec = self.setup.problem(d)?.with_pins(pin_initial.clone(), pin_terminal.clone())?;
            solve(&spec, None, &self.setup.tol)?.require_converged()
        });
        out.record.cell(format!("window tau={tau} N={len}"), started, &result.as_ref().map_err(|e| e.to_string()));
        let report = result?;
        let sources: Vec<Source> = (0..=len).map(|j| Source { tau, offset: j }).collect();
        out.with("window.csv", |w| write_estimate_csv(w, &report.trajectory, &sources, self.setup.model.q()))?;
        out.json(
            "window.json",
            &json!({
                "tau": tau,
                "N": len,
                "pin_initial": pin_initial,
                "pin_terminal": pin_terminal,
                "report": report.to_doc(),
            }),
        )?;
        Ok(out.record)
    }

    fn bound_constants(&self) -> BoundConstants<f64> {
        BoundConstants::new(&self.setup.model, &self.setup.weights)
    }

    /// Envelope fitted on every window profile of an approximate estimate.
    fn window_envelope(&self, windows: &[WindowSolution<f64>], fie: &SolveReport<f64>) -> Result<EnvelopeFit<f64>> {
        let profiles = windows.iter().map(|w| gap_profile(w, fie)).collect::<Result<Vec<_>>>()?;
        fit_envelope(&profiles, SideSelector::Auto)
    }

    fn bounds(&self, envelope: &EnvelopeFit<f64>, len: usize, v_t: f64) -> Result<Vec<(f64, f64)>> {
        let k = self.bound_constants();
        self.config
            .epsilons
            .iter()
            .map(|&eps| Ok((eps, theorem4_bound(eps, len, self.horizon(), envelope, &k, v_t)?)))
            .collect()
    }

    fn approx_outcome(&self, len: usize, fie: &SolveReport<f64>) -> Result<ApproxOutcome> {
        let est = approximate_estimator(&self.data, len, &self.setup, self.cache.as_ref(), self.parallel())?;
        let mut perf = self.perf(&est.trajectory, fie)?;
        let envelope = self.window_envelope(&est.windows, fie).ok();
        let bounds = match &envelope {
            Some(env) => self.bounds(env, len, fie.objective)?,
            None => Vec::new(),
        };
        if let Some(env) = &envelope {
            let k = self.bound_constants();
            perf = perf.with_bound(theorem4_bound(self.config.bound_epsilon, len, self.horizon(), env, &k, fie.objective)?);
        }
        Ok(ApproxOutcome { est, perf, envelope, bounds })
    }

    fn mhe_outcome(&self, len: usize, fie: &SolveReport<f64>) -> Result<(MheEstimate<f64>, PerfReport<f64>)> {
        let est = mhe_sequence(&self.data, len, &self.setup, self.cache.as_ref(), self.parallel())?;
        let perf = self.perf(&est.trajectory, fie)?;
        Ok((est, perf))
    }

    /// Approximate estimator of window length `len`: `ae_N{len}.csv`,
    /// `ae_N{len}.json` and `fie.csv`.
    pub fn run_approx(&self, len: usize) -> Result<RunRecord> {
        let mut out = self.out()?;
        let fie = self.fie()?;
        self.write_fie(&mut out, &fie)?;
        let started = Instant::now();
        let result = self.pool.install(|| self.approx_outcome(len, &fie));
        out.record.cell(format!("ae N={len}"), started, &result.as_ref().map(|_| ()).map_err(|e| e.to_string()));
        let o = result?;
        let q = self.setup.model.q();
        out.with(&format!("ae_N{len}.csv"), |w| write_estimate_csv(w, &o.est.trajectory, &o.est.sources, q))?;
        out.json(&format!("ae_N{len}.json"), &o.to_json(len))?;
        Ok(out.record)
    }

    /// Moving-horizon estimator: `mhe_N{len}.csv`, `mhe_N{len}.json` and
    /// `fie.csv`.
    pub fn run_mhe(&self, len: usize) -> Result<RunRecord> {
        let mut out = self.out()?;
        let fie = self.fie()?;
        self.write_fie(&mut out, &fie)?;
        let started = Instant::now();
        let result = self.pool.install(|| self.mhe_outcome(len, &fie));
        out.record.cell(format!("mhe N={len}"), started, &result.as_ref().map(|_| ()).map_err(|e| e.to_string()));
        let (est, perf) = result?;
        let q = self.setup.model.q();
        out.with(&format!("mhe_N{len}.csv"), |w| write_estimate_csv(w, &est.trajectory, &est.sources, q))?;
        out.json(
            &format!("mhe_N{len}.json"),
            &json!({ "N": len, "perf": perf.to_doc(), "objectives": est.objectives }),
        )?;
        Ok(out.record)
    }

    /// Turnpike scan over `lens × taus`: `profiles.csv`, `scan.csv`,
    /// `envelope.json` and `fie.csv`. Failed cells stay in `scan.csv`.
    pub fn run_scan(&self) -> Result<RunRecord> {
        let mut out = self.out()?;
        let fie = self.fie()?;
        self.write_fie(&mut out, &fie)?;
        let grid = scan_grid(self.horizon(), &self.lens, &self.taus);
        if grid.is_empty() {
            return Err(Error::Config(format!("no (tau, N) cell fits in T = {}", self.horizon())));
        }
        let started = Instant::now();
        let cells = self
            .pool
            .install(|| turnpike_scan(&self.data, &fie, &grid, &self.setup, self.cache.as_ref(), self.parallel()));
        let eps = self.config.excursion_epsilon;
        for c in &cells {
            let status = c.error.clone().map_or(Ok(()), Err);
            out.record.cell(format!("scan tau={} N={}", c.tau, c.len), started, &status);
        }
        let profiles: Vec<GapProfile<f64>> = cells.iter().filter_map(|c| c.profile.clone()).collect();
        out.with("profiles.csv", |w| write_profiles_csv(w, &profiles))?;
        out.with("scan.csv", |w| {
            let mut w = csv::Writer::from_writer(w);
            w.write_record(["tau", "N", "side", "status", "max_gap", "midpoint", "excursions", "error"])?;
            for c in &cells {
                let side = side_name(Side::for_window(c.tau, c.len, self.horizon()));
                let row = match &c.profile {
                    Some(p) => [
                        c.tau.to_string(),
                        c.len.to_string(),
                        side.into(),
                        "ok".into(),
                        p.max_gap().to_string(),
                        p.midpoint().to_string(),
                        excursion_count(p, eps)?.to_string(),
                        String::new(),
                    ],
                    None => [
                        c.tau.to_string(),
                        c.len.to_string(),
                        side.into(),
                        "failed".into(),
                        String::new(),
                        String::new(),
                        String::new(),
                        c.error.clone().unwrap_or_default(),
                    ],
                };
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        })?;
        out.json("envelope.json", &self.envelope_json(&profiles))?;
        Ok(out.record)
    }

    fn envelope_json(&self, profiles: &[GapProfile<f64>]) -> Value {
        let fit = |ps: &[GapProfile<f64>], sel| match fit_envelope(ps, sel) {
            Ok(f) => json!(f.to_doc()),
            Err(e) => json!({ "error": e.to_string() }),
        };
        let interior: Vec<GapProfile<f64>> =
            profiles.iter().filter(|p| p.side() == Side::TwoSided).cloned().collect();
        let interior_fit = fit_envelope(&interior, SideSelector::Fixed(Side::TwoSided)).ok();
        let per_len: Vec<Value> = self
            .lens
            .iter()
            .map(|&len| {
                let ps: Vec<GapProfile<f64>> = profiles.iter().filter(|p| p.len == len).cloned().collect();
                json!({ "N": len, "fit": fit(&ps, SideSelector::Auto) })
            })
            .collect();
        let boundary: Vec<Value> = match &interior_fit {
            Some(f) => profiles
                .iter()
                .filter(|p| p.side() != Side::TwoSided)
                .map(|p| {
                    let (a, b) = arc_coefficients(p, f.rho);
                    json!({ "tau": p.tau, "N": p.len, "side": p.side(), "a": a, "b": b })
                })
                .collect(),
            None => Vec::new(),
        };
        json!({
            "interior": fit(&interior, SideSelector::Fixed(Side::TwoSided)),
            "auto": fit(profiles, SideSelector::Auto),
            "per_N": per_len,
            "boundary_arcs": boundary,
            "excursion_epsilon": self.config.excursion_epsilon,
        })
    }

    /// Pinned-endpoint sensitivity on `d_{τ:τ+N}`: the first pin pair is the
    /// full-information estimate at `τ` and `τ+N`, the second shifts every
    /// component by `delta_initial` and `delta_terminal`. Writes `probe.csv`
    /// and `probe.json`.
    pub fn run_probe(&self, tau: usize, len: usize, delta_initial: f64, delta_terminal: f64) -> Result<RunRecord> {
        let mut out = self.out()?;
        let fie = self.fie()?;
        if tau + len > self.horizon() {
            return Err(Error::InvalidArgument(format!("window [{tau}, {}] exceeds T = {}", tau + len, self.horizon())));
        }
        let shift = |x: &[f64], d: f64| x.iter().map(|v| v + d).collect::<Vec<_>>();
        let base = PinPair { initial: fie.trajectory.x(tau).to_vec(), terminal: fie.trajectory.x(tau + len).to_vec() };
        let moved = PinPair { initial: shift(&base.initial, delta_initial), terminal: shift(&base.terminal, delta_terminal) };
        let started = Instant::now();
        let result = self.data.window(tau, len).and_then(|d| sensitivity_probe(&d, [base, moved], &self.setup));
        out.record.cell(format!("probe tau={tau} N={len}"), started, &result.as_ref().map(|_| ()).map_err(|e| e.to_string()));
        let probe = result?;
        out.with("probe.csv", |w| {
            let mut w = csv::Writer::from_writer(w);
            w.write_record(["j", "diff", "envelope"])?;
            let f = &probe.fit;
            for (j, d) in probe.differences.iter().enumerate() {
                let env = f.c
                    * (probe.initial_distance * f.rho.powi(j as i32)
                        + probe.terminal_distance * f.rho.powi((len - j) as i32));
                w.write_record([j.to_string(), d.to_string(), env.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })?;
        out.json(
            "probe.json",
            &json!({
                "tau": tau,
                "N": len,
                "pins": probe.pins.iter().map(|p| json!({ "initial": p.initial, "terminal": p.terminal })).collect::<Vec<_>>(),
                "initial_distance": probe.initial_distance,
                "terminal_distance": probe.terminal_distance,
                "fit": probe.fit.to_doc(),
                "objectives": [probe.reports[0].objective, probe.reports[1].objective],
            }),
        )?;
        Ok(out.record)
    }

    /// AE and MHE for every window length: `summary.csv`, `compare.json`,
    /// `fie.csv` and the trajectory of every estimator that succeeded.
    pub fn run_compare(&self) -> Result<RunRecord> {
        let mut out = self.out()?;
        let fie = self.fie()?;
        self.write_fie(&mut out, &fie)?;
        let fie_sne = self.true_states().map(|t| crate::performance::sne(fie.trajectory.states(), t)).transpose()?;
        let run_len = |&len: &usize| {
            let t0 = Instant::now();
            let ae = self.approx_outcome(len, &fie).map_err(|e| e.to_string());
            let t_ae = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let mhe = self.mhe_outcome(len, &fie).map_err(|e| e.to_string());
            (len, ae, t_ae, mhe, t1.elapsed().as_secs_f64())
        };
        let outcomes: Vec<_> = self.pool.install(|| {
            if self.parallel() {
                self.lens.par_iter().map(run_len).collect()
            } else {
                self.lens.iter().map(run_len).collect()
            }
        });
        let lemma4 = lemma4_constants(&self.scenario.sets, &self.setup.weights, &self.setup.model);
        let q = self.setup.model.q();
        let mut rows = Vec::new();
        let mut per_len = Vec::new();
        for (len, ae, t_ae, mhe, t_mhe) in &outcomes {
            let status = |r: &std::result::Result<_, String>, t: f64, label: String| CellStatus {
                label,
                ok: r.is_ok(),
                error: r.as_ref().err().cloned(),
                wall_time_s: t,
            };
            out.record.cells.push(status(&ae.as_ref().map(|_| ()).map_err(Clone::clone), *t_ae, format!("ae N={len}")));
            out.record.cells.push(status(&mhe.as_ref().map(|_| ()).map_err(Clone::clone), *t_mhe, format!("mhe N={len}")));
            if let Ok(o) = ae {
                out.with(&format!("ae_N{len}.csv"), |w| write_estimate_csv(w, &o.est.trajectory, &o.est.sources, q))?;
            }
            if let Ok((est, _)) = mhe {
                out.with(&format!("mhe_N{len}.csv"), |w| write_estimate_csv(w, &est.trajectory, &est.sources, q))?;
            }
            let ae_perf = ae.as_ref().ok().map(|o| o.perf);
            let mhe_perf = mhe.as_ref().ok().map(|(_, p)| *p);
            rows.push(SummaryRow {
                len: *len,
                j_ae: ae_perf.map(|p| p.j_candidate),
                j_mhe: mhe_perf.map(|p| p.j_candidate),
                v_t: fie.objective,
                gap_ae: ae_perf.map(|p| p.gap),
                gap_mhe: mhe_perf.map(|p| p.gap),
                sne_fie: fie_sne,
                sne_ae: ae_perf.and_then(|p| p.sne),
                sne_mhe: mhe_perf.and_then(|p| p.sne),
                bound: ae_perf.and_then(|p| p.bound),
            });
            let averaged = match (ae, &lemma4) {
                (Ok(o), Ok((a, _))) => self.averaged_json(*len, o, &fie, *a),
                _ => Value::Null,
            };
            per_len.push(json!({
                "N": len,
                "ae": match ae { Ok(o) => o.to_json(*len), Err(e) => json!({ "error": e }) },
                "mhe": match mhe {
                    Ok((est, p)) => json!({ "perf": p.to_doc(), "terminal_error": self.terminal_error(&est.trajectory) }),
                    Err(e) => json!({ "error": e }),
                },
                "averaged": averaged,
            }));
        }
        out.with("summary.csv", |w| write_summary_csv(w, &rows))?;
        let t = self.horizon() as f64;
        let lemma4 = match lemma4 {
            Ok((a, b)) => json!({ "A": a, "B": b, "linear_bound": a * t + b, "holds": fie.objective <= a * t + b }),
            Err(e) => json!({ "error": e.to_string() }),
        };
        out.json(
            "compare.json",
            &json!({
                "T": self.horizon(),
                "V_T": fie.objective,
                "sne_fie": fie_sne,
                "bound_epsilon": self.config.bound_epsilon,
                "lemma4": lemma4,
                "per_N": per_len,
            }),
        )?;
        Ok(out.record)
    }

    fn terminal_error(&self, traj: &EstimateTrajectory<f64>) -> Option<f64> {
        let t = self.horizon();
        self.true_states().map(|s| crate::linalg::dist(traj.x(t), &s[t]))
    }

    fn averaged_json(&self, len: usize, o: &ApproxOutcome, fie: &SolveReport<f64>, a: f64) -> Value {
        let t = self.horizon() as f64;
        let (avg_j, avg_v) = (o.perf.j_candidate / t, fie.objective / t);
        let bounds: Vec<Value> = match &o.envelope {
            Some(env) => {
                let s1 = sigma1(&self.bound_constants(), env, len);
                self.config
                    .epsilons
                    .iter()
                    .filter_map(|&eps| averaged_bound(avg_v, eps, a, s1).ok())
                    .zip(&self.config.epsilons)
                    .map(|(b, eps)| json!({ "epsilon": eps, "bound": b, "valid": b >= avg_j }))
                    .collect()
            }
            None => Vec::new(),
        };
        json!({ "J_over_T": avg_j, "V_over_T": avg_v, "bounds": bounds })
    }

    /// Scores an estimate read from `candidate` (columns `x_*` and `w_*`).
    /// With `len`, attaches the bounds of window length `len`, whose
    /// envelope is fitted on the `T − N + 1` window solves. Writes
    /// `perf.json`.
    pub fn run_perf_report(&self, candidate: &Path, len: Option<usize>) -> Result<RunRecord> {
        let traj = read_estimate_csv(File::open(candidate)?)?;
        let mut out = self.out()?;
        let fie = self.fie()?;
        let mut perf = self.perf(&traj, &fie)?;
        let mut bounds = Value::Null;
        if let Some(len) = len {
            if len > self.horizon() {
                return Err(Error::InvalidArgument(format!("N = {len} exceeds T = {}", self.horizon())));
            }
            let keys: Vec<(usize, usize)> = (0..=self.horizon() - len).map(|tau| (tau, len)).collect();
            let started = Instant::now();
            let windows = self
                .pool
                .install(|| solve_windows(&self.data, &keys, &self.setup, self.cache.as_ref(), self.parallel()));
            out.record.cell(format!("windows N={len}"), started, &windows.as_ref().map(|_| ()).map_err(|e| e.to_string()));
            let env = self.window_envelope(&windows?, &fie)?;
            let k = self.bound_constants();
            perf = perf.with_bound(theorem4_bound(self.config.bound_epsilon, len, self.horizon(), &env, &k, fie.objective)?);
            let list: Vec<Value> = self
                .bounds(&env, len, fie.objective)?
                .into_iter()
                .map(|(eps, b)| json!({ "epsilon": eps, "bound": b, "valid": b >= perf.j_candidate }))
                .collect();
            bounds = json!({ "N": len, "envelope": env.to_doc(), "bounds": list });
        }
        out.json(
            "perf.json",
            &json!({ "candidate": candidate.display().to_string(), "perf": perf.to_doc(), "bounds": bounds }),
        )?;
        Ok(out.record)
    }
}

fn default_taus(horizon: usize) -> Vec<Option<usize>> {
    // Left boundary, interior starts spread over the record, right boundary.
    let mut taus = vec![Some(0)];
    taus.extend([2, 5, 9].iter().map(|&k| Some(horizon * k / 14)));
    taus.push(None);
    taus.dedup();
    taus
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Left => "left",
        Side::Right => "right",
        Side::TwoSided => "two_sided",
    }
}

struct ApproxOutcome {
    est: ApproxEstimate<f64>,
    perf: PerfReport<f64>,
    envelope: Option<EnvelopeFit<f64>>,
    bounds: Vec<(f64, f64)>,
}

impl ApproxOutcome {
    fn to_json(&self, len: usize) -> Value {
        let bounds: Vec<Value> = self
            .bounds
            .iter()
            .map(|(eps, b)| json!({ "epsilon": eps, "bound": b, "valid": *b >= self.perf.j_candidate }))
            .collect();
        json!({
            "N": len,
            "perf": self.perf.to_doc(),
            "envelope": self.envelope.map(|e| e.to_doc()),
            "bounds": bounds,
            "windows": self.est.windows.len(),
        })
    }
}

struct Outputs {
    dir: PathBuf,
    record: RunRecord,
}

impl Outputs {
    fn with(&mut self, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        write(&mut w)?;
        w.flush()?;
        self.record.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }
}

/// `j,x_*,w_*,v_*` of a simulation; the last row has no disturbance.
pub fn write_truth_csv<W: Write>(writer: W, sim: &Simulation<f64>) -> Result<()> {
    let n = sim.states.first().map_or(0, Vec::len);
    let q = sim.disturbances.first().map_or(0, Vec::len);
    let p = sim.noise.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["j".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..q).map(|i| format!("w_{i}")));
    header.extend((0..p).map(|i| format!("v_{i}")));
    w.write_record(&header)?;
    for (j, x) in sim.states.iter().enumerate() {
        let mut row = vec![j.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        match sim.disturbances.get(j) {
            Some(d) => row.extend(d.iter().map(|v| v.to_string())),
            None => row.extend((0..q).map(|_| String::new())),
        }
        match sim.noise.get(j) {
            Some(d) => row.extend(d.iter().map(|v| v.to_string())),
            None => row.extend((0..p).map(|_| String::new())),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `x_*` and `w_*` columns of an estimate CSV. The disturbance
/// cells of the last row are ignored.
pub fn read_estimate_csv<R: Read>(reader: R) -> Result<EstimateTrajectory<f64>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let cols = |prefix: &str| header.iter().enumerate().filter(|(_, h)| h.starts_with(prefix)).map(|(i, _)| i).collect::<Vec<_>>();
    let (xs, ws) = (cols("x_"), cols("w_"));
    if xs.is_empty() {
        return Err(Error::Config("estimate CSV has no x_ columns".into()));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?} in estimate CSV")));
    let mut states = Vec::new();
    let mut dist = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        states.push(xs.iter().map(|&i| parse(&rec[i])).collect::<Result<Vec<_>>>()?);
        dist.push(ws.iter().map(|&i| parse(&rec[i])).collect::<Result<Vec<_>>>()?);
    }
    dist.pop();
    EstimateTrajectory::new(states, dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig { out: dir.to_path_buf(), parallel: 1, ..Default::default() }
    }

    #[test]
    fn defaults_resolve_to_the_motivating_example() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(config(dir.path())).unwrap();
        assert_eq!(exp.horizon(), 70);
        assert_eq!(exp.lens, vec![5, 10, 15, 20]);
        assert_eq!(exp.taus, vec![Some(0), Some(10), Some(25), Some(45), None]);
    }

    #[test]
    fn scale_shrinks_the_reactor_study() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { scenario: "batch_reactor".into(), scale: 0.25, ..config(dir.path()) };
        let exp = Experiment::new(cfg).unwrap();
        assert_eq!(exp.horizon(), 100);
        assert_eq!(exp.lens, vec![10, 18, 26, 32, 40]);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in [
            ExperimentConfig { scale: 0.0, ..config(dir.path()) },
            ExperimentConfig { epsilons: vec![], ..config(dir.path()) },
            ExperimentConfig { scenario: "no/such/file.json".into(), ..config(dir.path()) },
            ExperimentConfig { horizons: Some(vec![0]), ..config(dir.path()) },
        ] {
            assert!(matches!(Experiment::new(cfg), Err(Error::Config(_))));
        }
        let unknown = serde_json::from_str::<ExperimentConfig>(r#"{"scenaro": "motivating"}"#);
        assert!(unknown.is_err());
    }

    #[test]
    fn estimate_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(ExperimentConfig { horizon: Some(12), ..config(dir.path()) }).unwrap();
        exp.run_fie().unwrap();
        let traj = read_estimate_csv(File::open(dir.path().join("fie.csv")).unwrap()).unwrap();
        let fie = exp.fie().unwrap();
        assert_eq!(traj.horizon(), 12);
        for j in 0..=12 {
            assert_eq!(traj.x(j), fie.trajectory.x(j));
        }
    }
}
