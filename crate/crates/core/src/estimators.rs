//! Estimators assembled from window solves: the full-information reference,
//! truncated windows, the stitched approximate estimator and moving-horizon
//! estimation.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::cost::{CostWeights, EstimateTrajectory};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::solver::{solve, ProblemSpec, SolveReport, ToleranceConfig};
use crate::system_model::{ConstraintSets, DataBatch, SystemModel};

/// Model, sets, weights and tolerances shared by every solve of a study.
#[derive(Debug, Clone)]
pub struct EstimationSetup<S: Scalar> {
    pub model: SystemModel<S>,
    pub sets: ConstraintSets<S>,
    pub weights: CostWeights<S>,
    pub tol: ToleranceConfig,
}

impl<S: Scalar> EstimationSetup<S> {
    pub fn new(model: SystemModel<S>, sets: ConstraintSets<S>, weights: CostWeights<S>, tol: ToleranceConfig) -> Self {
        Self { model, sets, weights, tol }
    }

    pub fn problem(&self, data: DataBatch<S>) -> Result<ProblemSpec<S>> {
        ProblemSpec::new(data, self.model.clone(), self.sets.clone(), self.weights.clone())
    }
}

/// Solution of the truncated problem on `d_{τ:τ+N}`.
#[derive(Debug, Clone)]
pub struct WindowSolution<S> {
    pub tau: usize,
    pub len: usize,
    pub report: SolveReport<S>,
}

type CacheKey = (usize, usize, u64);

/// Memo of window solves keyed by `(τ, N, data fingerprint)`. A cache must
/// only be shared between calls that use the same [`EstimationSetup`].
#[derive(Debug, Default)]
pub struct WindowCache<S> {
    map: Mutex<HashMap<CacheKey, SolveReport<S>>>,
}

impl<S: Scalar> WindowCache<S> {
    pub fn new() -> Self {
        Self { map: Mutex::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &CacheKey) -> Option<SolveReport<S>> {
        self.map.lock().expect("cache lock").get(key).cloned()
    }

    fn put(&self, key: CacheKey, report: SolveReport<S>) {
        self.map.lock().expect("cache lock").insert(key, report);
    }
}

/// `ζ_T(·, d_{0:T})`: converged solution of the full problem.
pub fn fie_reference<S: Scalar>(data: &DataBatch<S>, setup: &EstimationSetup<S>) -> Result<SolveReport<S>> {
    solve(&setup.problem(data.clone())?, None, &setup.tol)?.require_converged()
}

/// Solves `P_N(d_{τ:τ+N})` (must converge), consulting `cache` first.
pub fn solve_window<S: Scalar>(
    data: &DataBatch<S>,
    tau: usize,
    len: usize,
    setup: &EstimationSetup<S>,
    cache: Option<&WindowCache<S>>,
) -> Result<WindowSolution<S>> {
    if tau + len > data.horizon() {
        return Err(Error::Length(format!("window [{tau}, {}] exceeds horizon {}", tau + len, data.horizon())));
    }
    let key = (tau, len, data.fingerprint());
    if let Some(report) = cache.and_then(|c| c.get(&key)) {
        return Ok(WindowSolution { tau, len, report });
    }
    let report = solve(&setup.problem(data.window(tau, len)?)?, None, &setup.tol)?
        .require_converged()
        .map_err(|e| Error::Solver(format!("window tau = {tau}, N = {len}: {e}")))?;
    if let Some(c) = cache {
        c.put(key, report.clone());
    }
    Ok(WindowSolution { tau, len, report })
}

/// Solves every window in `windows` (pairs `(τ, N)`), in parallel when
/// asked. The result order follows `windows`.
pub fn solve_windows<S: Scalar>(
    data: &DataBatch<S>,
    windows: &[(usize, usize)],
    setup: &EstimationSetup<S>,
    cache: Option<&WindowCache<S>>,
    parallel: bool,
) -> Result<Vec<WindowSolution<S>>> {
    let run = |&(tau, len): &(usize, usize)| solve_window(data, tau, len, setup, cache);
    let results: Vec<Result<WindowSolution<S>>> =
        if parallel { windows.par_iter().map(run).collect() } else { windows.iter().map(run).collect() };
    results.into_iter().collect()
}

/// Window `(τ, offset)` whose point supplies index `j` of an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Source {
    pub tau: usize,
    pub offset: usize,
}

/// Stitched estimate of the approximate estimator.
#[derive(Debug, Clone)]
pub struct ApproxEstimate<S> {
    pub trajectory: EstimateTrajectory<S>,
    pub sources: Vec<Source>,
    pub len: usize,
    /// All window solves, ordered by `τ`.
    pub windows: Vec<WindowSolution<S>>,
}

/// Index arithmetic of the approximate estimator: `j ≤ N/2` reads window
/// `[0, N]` at offset `j`; `N/2 < j < T − N/2` reads the centered window at
/// offset `N/2`; `j ≥ T − N/2` reads window `[T−N, T]`.
pub fn approx_source(j: usize, horizon: usize, len: usize) -> Source {
    let half = len / 2;
    if j <= half {
        Source { tau: 0, offset: j }
    } else if j + half < horizon {
        Source { tau: j - half, offset: half }
    } else {
        Source { tau: horizon - len, offset: j - (horizon - len) }
    }
}

fn check_additive<S: Scalar>(model: &SystemModel<S>) -> Result<()> {
    if model.is_additive() {
        Ok(())
    } else {
        Err(Error::NotAdditive(format!("{} (disturbance recovery needs f = f_a + w)", model.name())))
    }
}

/// `w_j = x_{j+1} − f_a(x_j, u_j)`.
pub fn recover_disturbances<S: Scalar>(
    states: &[Vec<S>],
    data: &DataBatch<S>,
    model: &SystemModel<S>,
) -> Result<Vec<Vec<S>>> {
    (0..states.len().saturating_sub(1))
        .map(|j| {
            let fa = model.f_a(&states[j], data.u(j))?;
            Ok(states[j + 1].iter().zip(&fa).map(|(a, b)| *a - *b).collect())
        })
        .collect()
}

/// Stitches the approximate estimator from the `T − N + 1` window solves of
/// length `N`.
pub fn approximate_estimator<S: Scalar>(
    data: &DataBatch<S>,
    len: usize,
    setup: &EstimationSetup<S>,
    cache: Option<&WindowCache<S>>,
    parallel: bool,
) -> Result<ApproxEstimate<S>> {
    let horizon = data.horizon();
    if !len.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window length N = {len} must be even")));
    }
    if len > horizon {
        return Err(Error::InvalidArgument(format!("window length N = {len} exceeds horizon T = {horizon}")));
    }
    check_additive(&setup.model)?;
    let keys: Vec<(usize, usize)> = (0..=horizon - len).map(|tau| (tau, len)).collect();
    let windows = solve_windows(data, &keys, setup, cache, parallel)?;
    let sources: Vec<Source> = (0..=horizon).map(|j| approx_source(j, horizon, len)).collect();
    let states: Vec<Vec<S>> = sources.iter().map(|s| windows[s.tau].report.trajectory.x(s.offset).to_vec()).collect();
    let dist = recover_disturbances(&states, data, &setup.model)?;
    Ok(ApproxEstimate { trajectory: EstimateTrajectory::new(states, dist)?, sources, len, windows })
}

/// Moving-horizon estimate for every `t ∈ [0, T]`.
#[derive(Debug, Clone)]
pub struct MheEstimate<S> {
    pub trajectory: EstimateTrajectory<S>,
    /// Window behind each estimate: `(0, t)` with length `t` while `t < N`,
    /// then `(t − N, N)` with length `N`.
    pub sources: Vec<Source>,
    pub len: usize,
    pub objectives: Vec<S>,
}

/// `x̂_t = ζ_t(t, d_{0:t})` for `t < N` and `ζ_N(N, d_{t−N:t})` afterwards;
/// disturbances recovered from consecutive estimates.
pub fn mhe_sequence<S: Scalar>(
    data: &DataBatch<S>,
    len: usize,
    setup: &EstimationSetup<S>,
    cache: Option<&WindowCache<S>>,
    parallel: bool,
) -> Result<MheEstimate<S>> {
    if len == 0 {
        return Err(Error::InvalidArgument("MHE window length must be at least 1".into()));
    }
    check_additive(&setup.model)?;
    let horizon = data.horizon();
    let keys: Vec<(usize, usize)> =
        (0..=horizon).map(|t| if t < len { (0, t) } else { (t - len, len) }).collect();
    let windows = solve_windows(data, &keys, setup, cache, parallel)?;
    let states: Vec<Vec<S>> = windows.iter().map(|w| w.report.trajectory.x(w.len).to_vec()).collect();
    let sources = windows.iter().map(|w| Source { tau: w.tau, offset: w.len }).collect();
    let objectives = windows.iter().map(|w| w.report.objective).collect();
    let dist = recover_disturbances(&states, data, &setup.model)?;
    Ok(MheEstimate { trajectory: EstimateTrajectory::new(states, dist)?, sources, len, objectives })
}

/// Writes `j,x_0..,w_0..,source_tau,source_offset`; the disturbance columns
/// of the last row hold the terminal convention `w_T = 0`.
pub fn write_estimate_csv<S: Scalar, W: Write>(
    writer: W,
    traj: &EstimateTrajectory<S>,
    sources: &[Source],
    q: usize,
) -> Result<()> {
    let n = traj.x(0).len();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["j".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..q).map(|i| format!("w_{i}")));
    header.push("source_tau".into());
    header.push("source_offset".into());
    w.write_record(&header)?;
    for j in 0..=traj.horizon() {
        let mut rec = vec![j.to_string()];
        rec.extend(traj.z(j, q).iter().map(|v| format!("{}", v.as_f64())));
        let src = sources.get(j).copied().unwrap_or(Source { tau: 0, offset: j });
        rec.push(src.tau.to_string());
        rec.push(src.offset.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system_model::{batch_reactor_scenario, motivating_scenario, simulate, ModelSpec};

    fn motivating(horizon: usize) -> (DataBatch<f64>, EstimationSetup<f64>) {
        let sc = motivating_scenario::<f64>(horizon).unwrap();
        let sim = simulate(&sc, 0).unwrap();
        (sim.data, EstimationSetup::new(sc.model, sc.solve_sets, sc.weights, ToleranceConfig::default()))
    }

    #[test]
    fn index_mapping_for_t10_n4() {
        let src: Vec<(usize, usize)> = (0..=10).map(|j| approx_source(j, 10, 4)).map(|s| (s.tau, s.offset)).collect();
        assert_eq!(
            src,
            vec![(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (3, 2), (4, 2), (5, 2), (6, 2), (6, 3), (6, 4)]
        );
    }

    #[test]
    fn every_index_has_one_source_in_range() {
        for horizon in [4usize, 7, 12] {
            for len in (0..=horizon).step_by(2) {
                for j in 0..=horizon {
                    let s = approx_source(j, horizon, len);
                    assert!(s.tau + len <= horizon && s.offset <= len && s.tau + s.offset == j);
                }
            }
        }
    }

    #[test]
    fn odd_or_too_long_windows_are_rejected() {
        let (data, setup) = motivating(10);
        assert!(matches!(approximate_estimator(&data, 3, &setup, None, false), Err(Error::InvalidArgument(_))));
        assert!(matches!(approximate_estimator(&data, 12, &setup, None, false), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_additive_models_are_rejected() {
        let model = ModelSpec::SaturatingScalar { a: 0.9 }.build::<f64>().unwrap();
        let data = DataBatch::new(0, 1, vec![vec![]; 5], vec![vec![0.0]; 5]).unwrap();
        let setup = EstimationSetup::new(
            model,
            ConstraintSets::unbounded(1, 0, 1, 1),
            CostWeights::identity(1, 1, crate::cost::TerminalMode::Filtering),
            ToleranceConfig::default(),
        );
        assert!(matches!(approximate_estimator(&data, 2, &setup, None, false), Err(Error::NotAdditive(_))));
        assert!(matches!(mhe_sequence(&data, 2, &setup, None, false), Err(Error::NotAdditive(_))));
    }

    #[test]
    fn full_window_reproduces_fie() {
        let (data, setup) = motivating(10);
        let fie = fie_reference(&data, &setup).unwrap();
        let ae = approximate_estimator(&data, 10, &setup, None, false).unwrap();
        assert_eq!(ae.windows.len(), 1);
        assert_eq!(ae.trajectory.states(), fie.trajectory.states());
    }

    #[test]
    fn ae_is_dynamically_feasible_and_parallel_matches_serial() {
        let sc = batch_reactor_scenario::<f64>(40, 2).unwrap();
        let sim = simulate(&sc, 2).unwrap();
        let setup = EstimationSetup::new(sc.model.clone(), sc.solve_sets, sc.weights, ToleranceConfig::default());
        let a = approximate_estimator(&sim.data, 10, &setup, None, false).unwrap();
        let b = approximate_estimator(&sim.data, 10, &setup, None, true).unwrap();
        assert_eq!(a.windows.len(), 31);
        assert_eq!(a.trajectory, b.trajectory);
        assert!(a.trajectory.dynamics_defect(&sc.model, &sim.data).unwrap() < 1e-12);
    }

    #[test]
    fn mhe_head_is_growing_horizon_fie_and_tail_matches_ae() {
        let (data, setup) = motivating(12);
        let cache = WindowCache::new();
        let mhe = mhe_sequence(&data, 4, &setup, Some(&cache), false).unwrap();
        for t in 0..4 {
            let fie = fie_reference(&data.window(0, t).unwrap(), &setup).unwrap();
            assert_eq!(mhe.trajectory.x(t), fie.trajectory.x(t));
        }
        let ae = approximate_estimator(&data, 4, &setup, Some(&cache), false).unwrap();
        assert_eq!(ae.trajectory.x(12), mhe.trajectory.x(12));
        let uncached = approximate_estimator(&data, 4, &setup, None, false).unwrap();
        assert_eq!(ae.trajectory, uncached.trajectory);
    }

    #[test]
    fn estimate_csv_has_expected_columns() {
        let (data, setup) = motivating(3);
        let fie = fie_reference(&data, &setup).unwrap();
        let mut buf = Vec::new();
        write_estimate_csv(&mut buf, &fie.trajectory, &[], 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "j,x_0,w_0,source_tau,source_offset");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].ends_with(",0,0,3"));
    }
}
