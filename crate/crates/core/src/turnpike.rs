//! Turnpike diagnostics: gap profiles of window solutions against the
//! full-information reference, exponential upper envelopes, excursion
//! counts and endpoint-sensitivity probes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::EstimateTrajectory;
use crate::error::{Error, Result};
use crate::estimators::{solve_window, EstimationSetup, WindowCache, WindowSolution};
use crate::linalg::dist;
use crate::scalar::Scalar;
use crate::solver::{solve, SolveReport, SolveStatus};
use crate::system_model::DataBatch;

/// Grid resolution of the decay rate `ρ`.
pub const RHO_STEPS: usize = 1000;

/// Which transient arcs an envelope term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Approaching arc only: `c ρ^j`.
    Left,
    /// Leaving arc only: `c ρ^{N−j}`.
    Right,
    /// `c (ρ^j + ρ^{N−j})`.
    TwoSided,
}

impl Side {
    /// Form for window `[τ, τ+N]` of a record of length `T`: windows at the
    /// start have no approaching arc, windows at the end no leaving arc.
    pub fn for_window(tau: usize, len: usize, horizon: usize) -> Side {
        if tau == 0 {
            Side::Right
        } else if tau + len == horizon {
            Side::Left
        } else {
            Side::TwoSided
        }
    }

    fn basis<S: Scalar>(self, rho: S, j: usize, len: usize) -> S {
        let left = || rho.powi(j as i32);
        let right = || rho.powi((len - j) as i32);
        match self {
            Side::Left => left(),
            Side::Right => right(),
            Side::TwoSided => left() + right(),
        }
    }
}

/// How [`fit_envelope`] assigns a form to each profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideSelector {
    /// [`Side::for_window`] per profile.
    Auto,
    Fixed(Side),
}

/// `g_j = |ẑ_{τ+j} − z*_{τ+j}|` for `j ∈ [0, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapProfile<S> {
    pub tau: usize,
    pub len: usize,
    /// Horizon `T` of the reference.
    pub horizon: usize,
    pub gaps: Vec<S>,
}

impl<S: Scalar> GapProfile<S> {
    pub fn side(&self) -> Side {
        Side::for_window(self.tau, self.len, self.horizon)
    }

    pub fn max_gap(&self) -> S {
        self.gaps.iter().fold(S::zero(), |m, g| m.max(*g))
    }

    pub fn midpoint(&self) -> S {
        self.gaps[self.len / 2]
    }
}

/// Upper envelope `β̂(s) = c ρ^s` applied per side form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeFit<S> {
    pub side: Option<Side>,
    pub c: S,
    pub rho: S,
    /// Largest excess of an observation over its envelope, clipped at 0.
    pub residual: S,
}

impl<S: Scalar> EnvelopeFit<S> {
    /// `β̂(s) = c ρ^s`, for real `s`.
    pub fn beta(&self, s: S) -> S {
        self.c * self.rho.powf(s)
    }

    /// Envelope value at offset `j` of a length-`N` window of the given form.
    pub fn bound(&self, side: Side, j: usize, len: usize) -> S {
        self.c * side.basis(self.rho, j, len)
    }

    pub fn to_doc(&self) -> EnvelopeDoc {
        EnvelopeDoc { side: self.side, c: self.c.as_f64(), rho: self.rho.as_f64(), residual: self.residual.as_f64() }
    }
}

/// Serializable envelope parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeDoc {
    /// `None` when profiles of several forms were fitted together.
    pub side: Option<Side>,
    pub c: f64,
    pub rho: f64,
    pub residual: f64,
}

fn point_gap<S: Scalar>(a: &EstimateTrajectory<S>, ja: usize, b: &EstimateTrajectory<S>, jb: usize, last: bool) -> S {
    let dx = dist(a.x(ja), b.x(jb));
    if last {
        return dx;
    }
    let dw = dist(a.w(ja), b.w(jb));
    (dx * dx + dw * dw).sqrt()
}

/// Gap profile of a trajectory on `[τ, τ+N]` against a reference covering it.
///
/// Stages `j < N` compare the stacked `(x, w)`; the last stage compares `x`
/// only, since both the window and a pinned segment end in `(x, 0)`.
pub fn gap_profile_of<S: Scalar>(
    tau: usize,
    window: &EstimateTrajectory<S>,
    reference: &EstimateTrajectory<S>,
) -> Result<GapProfile<S>> {
    let len = window.horizon();
    if tau + len > reference.horizon() {
        return Err(Error::Length(format!(
            "window [{tau}, {}] outside reference horizon {}",
            tau + len,
            reference.horizon()
        )));
    }
    if window.x(0).len() != reference.x(0).len() {
        return Err(Error::Dimension("window and reference state dimensions differ".into()));
    }
    let gaps = (0..=len).map(|j| point_gap(window, j, reference, tau + j, j == len)).collect();
    Ok(GapProfile { tau, len, horizon: reference.horizon(), gaps })
}

pub fn gap_profile<S: Scalar>(window: &WindowSolution<S>, reference: &SolveReport<S>) -> Result<GapProfile<S>> {
    if window.report.trajectory.horizon() != window.len {
        return Err(Error::Length("window trajectory length does not match its N".into()));
    }
    gap_profile_of(window.tau, &window.report.trajectory, &reference.trajectory)
}

fn rho_grid<S: Scalar>() -> impl Iterator<Item = S> {
    (1..RHO_STEPS).map(|k| S::lit(k as f64 / RHO_STEPS as f64))
}

/// Best `(c, ρ)` over the grid for points `(g, basis(ρ))`: for each `ρ` the
/// smallest dominating `c`, then the `ρ` whose envelope has least total
/// mass (ties to the smaller `ρ`).
fn grid_fit<S: Scalar, F>(observed: &[S], basis: F) -> (S, S)
where
    F: Fn(S, usize) -> S,
{
    if observed.iter().all(|g| *g <= S::zero()) {
        return (S::zero(), S::lit(0.5));
    }
    let mut best: Option<(S, S, S)> = None;
    for rho in rho_grid::<S>() {
        let mut c = S::zero();
        let mut mass = S::zero();
        for (k, g) in observed.iter().enumerate() {
            let b = basis(rho, k);
            mass = mass + b;
            if *g > S::zero() {
                c = c.max(*g / b);
            }
        }
        let total = c * mass;
        if !total.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, _, m)| total < m) {
            best = Some((c, rho, total));
        }
    }
    match best {
        Some((c, rho, _)) => (c, rho),
        None => (S::infinity(), S::one()),
    }
}

fn residual<S: Scalar>(observed: &[S], envelope: impl Iterator<Item = S>) -> S {
    observed.iter().zip(envelope).fold(S::zero(), |m, (g, e)| m.max(*g - e))
}

/// Smallest-mass exponential envelope dominating every point of `profiles`
/// in its side form.
pub fn fit_envelope<S: Scalar>(profiles: &[GapProfile<S>], selector: SideSelector) -> Result<EnvelopeFit<S>> {
    if profiles.len() < 2 {
        return Err(Error::InvalidArgument(format!("envelope fit needs at least 2 profiles, got {}", profiles.len())));
    }
    if let Some(p) = profiles.iter().find(|p| p.len < 4) {
        return Err(Error::InvalidArgument(format!("envelope fit needs N ≥ 4, got N = {}", p.len)));
    }
    if profiles.iter().any(|p| p.gaps.len() != p.len + 1) {
        return Err(Error::Length("profile has the wrong number of gaps".into()));
    }
    let side_of = |p: &GapProfile<S>| match selector {
        SideSelector::Auto => p.side(),
        SideSelector::Fixed(s) => s,
    };
    let mut observed = Vec::new();
    let mut index = Vec::new();
    for p in profiles {
        for (j, g) in p.gaps.iter().enumerate() {
            observed.push(*g);
            index.push((side_of(p), j, p.len));
        }
    }
    let (c, rho) = grid_fit(&observed, |rho, k| {
        let (side, j, len) = index[k];
        side.basis(rho, j, len)
    });
    let mut fit = EnvelopeFit { side: None, c, rho, residual: S::zero() };
    let sides: Vec<Side> = profiles.iter().map(side_of).collect();
    if sides.iter().all(|s| *s == sides[0]) {
        fit.side = Some(sides[0]);
    }
    fit.residual = residual(&observed, index.iter().map(|&(side, j, len)| fit.bound(side, j, len)));
    Ok(fit)
}

/// Number of `j ∈ [0, N−1]` with `g_j > ε`.
pub fn excursion_count<S: Scalar>(profile: &GapProfile<S>, epsilon: S) -> Result<usize> {
    if !(epsilon > S::zero()) {
        return Err(Error::InvalidArgument("excursion threshold must be positive".into()));
    }
    Ok(profile.gaps[..profile.len].iter().filter(|g| **g > epsilon).count())
}

/// Coefficients `(a, b) ≥ 0` of the least-mass two-arc envelope
/// `a ρ^j + b ρ^{N−j}` dominating `profile` at fixed `ρ`.
///
/// A profile without an approaching arc needs `a = 0`; one without a
/// leaving arc needs `b = 0`.
pub fn arc_coefficients<S: Scalar>(profile: &GapProfile<S>, rho: S) -> (S, S) {
    let len = profile.len;
    let left: Vec<S> = (0..=len).map(|j| rho.powi(j as i32)).collect();
    let right: Vec<S> = (0..=len).map(|j| rho.powi((len - j) as i32)).collect();
    let g = &profile.gaps;
    let feasible = |a: S, b: S| {
        a >= S::zero()
            && b >= S::zero()
            && (0..=len).all(|j| a * left[j] + b * right[j] >= g[j] - S::lit(1e-12) * g[j].abs())
    };
    let mass_l: S = left.iter().copied().sum();
    let mass_r: S = right.iter().copied().sum();
    let ratio_max = |num: &[S], den: &[S]| num.iter().zip(den).fold(S::zero(), |m, (n, d)| m.max(*n / *d));
    // optimum of the 2-variable LP sits at an axis point or where two
    // constraints are tight
    let mut candidates = vec![(S::zero(), ratio_max(g, &right)), (ratio_max(g, &left), S::zero())];
    for i in 0..=len {
        for k in i + 1..=len {
            let det = left[i] * right[k] - left[k] * right[i];
            if det.abs() <= S::epsilon() * (left[i] * right[k]).abs().max(S::min_positive_value()) {
                continue;
            }
            let a = (g[i] * right[k] - g[k] * right[i]) / det;
            let b = (left[i] * g[k] - left[k] * g[i]) / det;
            candidates.push((a, b));
        }
    }
    let mut best = candidates[0];
    let mut best_mass = S::infinity();
    for (a, b) in candidates {
        if !a.is_finite() || !b.is_finite() || !feasible(a, b) {
            continue;
        }
        let mass = a * mass_l + b * mass_r;
        if mass < best_mass {
            best_mass = mass;
            best = (a, b);
        }
    }
    best
}

/// Endpoint pair of a pinned problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PinPair<S> {
    pub initial: Vec<S>,
    pub terminal: Vec<S>,
}

/// Response of the pinned problem to a change of its endpoints.
#[derive(Debug, Clone)]
pub struct SensitivityProbe<S> {
    pub pins: [PinPair<S>; 2],
    /// `|ζ̄(j; pins₁) − ζ̄(j; pins₂)|` on the stacked `(x, w)`, `j ∈ [0, N]`.
    pub differences: Vec<S>,
    pub initial_distance: S,
    pub terminal_distance: S,
    /// Fit of `diff_j ≤ c (|Δx^i| ρ^j + |Δx^t| ρ^{N−j})`.
    pub fit: EnvelopeFit<S>,
    pub reports: [SolveReport<S>; 2],
}

/// Solves the pinned problem on `data` (one window, `N = data.horizon()`)
/// for both pin pairs and compares the solutions point by point.
pub fn sensitivity_probe<S: Scalar>(
    data: &DataBatch<S>,
    pins: [PinPair<S>; 2],
    setup: &EstimationSetup<S>,
) -> Result<SensitivityProbe<S>> {
    let len = data.horizon();
    let mut reports = Vec::with_capacity(2);
    for (k, pair) in pins.iter().enumerate() {
        let spec = setup
            .problem(data.clone())?
            .with_pins(Some(pair.initial.clone()), Some(pair.terminal.clone()))?;
        let report = solve(&spec, None, &setup.tol)?;
        match report.status {
            SolveStatus::Converged => reports.push(report),
            SolveStatus::Infeasible => {
                return Err(Error::Infeasible(format!("pin pair {} admits no feasible trajectory", k + 1)))
            }
            SolveStatus::MaxIter => {
                return Err(Error::Solver(format!(
                    "pinned solve {} stopped at kkt residual {:e}",
                    k + 1,
                    report.kkt_residual.as_f64()
                )))
            }
        }
    }
    let (a, b) = (&reports[0].trajectory, &reports[1].trajectory);
    let differences: Vec<S> = (0..=len).map(|j| point_gap(a, j, b, j, j == len)).collect();
    let di = dist(&pins[0].initial, &pins[1].initial);
    let dt = dist(&pins[0].terminal, &pins[1].terminal);
    let basis = |rho: S, j: usize| di * rho.powi(j as i32) + dt * rho.powi((len - j) as i32);
    let (c, rho) = if len == 0 { (S::zero(), S::lit(0.5)) } else { grid_fit(&differences, basis) };
    let mut fit = EnvelopeFit { side: Some(Side::TwoSided), c, rho, residual: S::zero() };
    fit.residual = residual(&differences, (0..=len).map(|j| c * basis(rho, j)));
    let reports: [SolveReport<S>; 2] = reports.try_into().expect("two reports");
    Ok(SensitivityProbe { pins, differences, initial_distance: di, terminal_distance: dt, fit, reports })
}

/// One `(τ, N)` cell of a turnpike scan. Solver failures are kept as data.
#[derive(Debug, Clone)]
pub struct ScanCell<S> {
    pub tau: usize,
    pub len: usize,
    pub profile: Option<GapProfile<S>>,
    pub error: Option<String>,
}

/// Window keys of a scan: every `(τ, N)` with `τ + N ≤ T`; `None` for `τ`
/// stands for the right-boundary window `τ = T − N`. Duplicates are dropped
/// and the order follows `lens` then `taus`.
pub fn scan_grid(horizon: usize, lens: &[usize], taus: &[Option<usize>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &len in lens {
        if len > horizon {
            continue;
        }
        for tau in taus {
            let tau = tau.unwrap_or(horizon - len);
            if tau + len <= horizon && !out.contains(&(tau, len)) {
                out.push((tau, len));
            }
        }
    }
    out
}

/// Solves each window of `grid` and profiles it against `reference`.
pub fn turnpike_scan<S: Scalar>(
    data: &DataBatch<S>,
    reference: &SolveReport<S>,
    grid: &[(usize, usize)],
    setup: &EstimationSetup<S>,
    cache: Option<&WindowCache<S>>,
    parallel: bool,
) -> Vec<ScanCell<S>> {
    let run = |&(tau, len): &(usize, usize)| {
        match solve_window(data, tau, len, setup, cache).and_then(|w| gap_profile(&w, reference)) {
            Ok(p) => ScanCell { tau, len, profile: Some(p), error: None },
            Err(e) => ScanCell { tau, len, profile: None, error: Some(e.to_string()) },
        }
    };
    if parallel {
        grid.par_iter().map(run).collect()
    } else {
        grid.iter().map(run).collect()
    }
}

/// Long-format `tau,N,j,gap` table.
pub fn write_profiles_csv<S: Scalar, W: Write>(writer: W, profiles: &[GapProfile<S>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tau", "N", "j", "gap"])?;
    for p in profiles {
        for (j, g) in p.gaps.iter().enumerate() {
            w.write_record([p.tau.to_string(), p.len.to_string(), j.to_string(), format!("{}", g.as_f64())])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fie_reference;
    use crate::solver::ToleranceConfig;
    use crate::system_model::{motivating_scenario, simulate};

    fn synthetic(tau: usize, len: usize, horizon: usize, f: impl Fn(usize) -> f64) -> GapProfile<f64> {
        GapProfile { tau, len, horizon, gaps: (0..=len).map(f).collect() }
    }

    fn motivating(horizon: usize) -> (DataBatch<f64>, EstimationSetup<f64>) {
        let sc = motivating_scenario::<f64>(horizon).unwrap();
        let sim = simulate(&sc, 0).unwrap();
        (sim.data, EstimationSetup::new(sc.model, sc.solve_sets, sc.weights, ToleranceConfig::default()))
    }

    #[test]
    fn side_forms_follow_window_position() {
        assert_eq!(Side::for_window(0, 10, 70), Side::Right);
        assert_eq!(Side::for_window(60, 10, 70), Side::Left);
        assert_eq!(Side::for_window(25, 10, 70), Side::TwoSided);
    }

    #[test]
    fn zero_profiles_give_zero_envelope() {
        let p = synthetic(5, 6, 20, |_| 0.0);
        let fit = fit_envelope(&[p.clone(), p], SideSelector::Auto).unwrap();
        assert_eq!((fit.c, fit.rho), (0.0, 0.5));
    }

    #[test]
    fn recovers_synthetic_two_sided_envelope() {
        let mk = |len: usize| synthetic(5, len, 100, |j| 2.0 * (0.5f64.powi(j as i32) + 0.5f64.powi((len - j) as i32)));
        let fit = fit_envelope(&[mk(8), mk(12)], SideSelector::Auto).unwrap();
        assert!((fit.rho - 0.5).abs() <= 1e-3);
        assert!((fit.c - 2.0).abs() <= 1e-2, "{fit:?}");
        assert_eq!(fit.residual, 0.0);
        assert_eq!(fit.side, Some(Side::TwoSided));
    }

    #[test]
    fn fit_rejects_short_input() {
        let p = synthetic(5, 6, 20, |_| 1.0);
        assert!(fit_envelope(std::slice::from_ref(&p), SideSelector::Auto).is_err());
        let short = synthetic(5, 3, 20, |_| 1.0);
        assert!(fit_envelope(&[p, short], SideSelector::Auto).is_err());
    }

    #[test]
    fn excursions_count_indices_before_n() {
        let p = synthetic(1, 3, 10, |j| [1.0, 0.0, 0.0, 1.0][j]);
        assert_eq!(excursion_count(&p, 0.5).unwrap(), 1);
        let p = synthetic(1, 4, 10, |j| [1.0, 0.0, 0.0, 1.0, 1.0][j]);
        assert_eq!(excursion_count(&p, 0.5).unwrap(), 2);
        assert!(excursion_count(&p, 0.0).is_err());
    }

    #[test]
    fn arc_coefficients_separate_arcs() {
        let len = 10;
        let right_only = synthetic(0, len, 50, |j| 3.0 * 0.6f64.powi((len - j) as i32));
        let (a, b) = arc_coefficients(&right_only, 0.6);
        assert!(a.abs() < 1e-12 && (b - 3.0).abs() < 1e-9);
        let both = synthetic(5, len, 50, |j| 0.6f64.powi(j as i32) + 2.0 * 0.6f64.powi((len - j) as i32));
        let (a, b) = arc_coefficients(&both, 0.6);
        assert!((a - 1.0).abs() < 1e-9 && (b - 2.0).abs() < 1e-9);
    }

    #[test]
    fn identical_window_has_zero_profile() {
        let (data, setup) = motivating(20);
        let reference = fie_reference(&data, &setup).unwrap();
        let p = gap_profile_of(4, &reference.trajectory.clone(), &reference.trajectory).unwrap_err();
        assert!(matches!(p, Error::Length(_)));
        let w = WindowSolution { tau: 0, len: 20, report: reference.clone() };
        let p = gap_profile(&w, &reference).unwrap();
        assert!(p.gaps.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn interior_window_stays_near_turnpike() {
        let (data, setup) = motivating(70);
        let reference = fie_reference(&data, &setup).unwrap();
        let w = solve_window(&data, 25, 20, &setup, None).unwrap();
        let p = gap_profile(&w, &reference).unwrap();
        assert!(p.midpoint() < p.gaps[0].max(p.gaps[20]));
    }

    #[test]
    fn probe_with_identical_pins_is_zero_and_perturbation_decays() {
        let (data, setup) = motivating(70);
        let reference = fie_reference(&data, &setup).unwrap();
        let window = data.window(25, 20).unwrap();
        let pin = PinPair { initial: reference.trajectory.x(25).to_vec(), terminal: reference.trajectory.x(45).to_vec() };
        let same = sensitivity_probe(&window, [pin.clone(), pin.clone()], &setup).unwrap();
        assert!(same.differences.iter().all(|d| *d == 0.0));
        let moved = PinPair { initial: vec![pin.initial[0] + 1.0], terminal: pin.terminal.clone() };
        let probe = sensitivity_probe(&window, [pin, moved], &setup).unwrap();
        assert!(probe.differences[20] <= 1e-6);
        assert!(probe.differences.windows(2).all(|d| d[1] <= d[0] + 1e-12));
        assert!(probe.fit.rho < 1.0 && probe.fit.residual == 0.0);
    }

    #[test]
    fn scan_grid_resolves_right_boundary() {
        let grid = scan_grid(70, &[5, 10], &[Some(0), Some(10), None]);
        assert_eq!(grid, vec![(0, 5), (10, 5), (65, 5), (0, 10), (10, 10), (60, 10)]);
    }

    #[test]
    fn profiles_csv_is_long_format() {
        let p = synthetic(3, 4, 10, |j| j as f64);
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &[p]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tau,N,j,gap\n3,4,0,0\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
