//! Gauss-Newton SQP iterations: the primal-dual barrier loop, the
//! equality-constrained polish used to certify the final active set, and a
//! Levenberg-Marquardt feasibility restoration.

use log::{debug, trace};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf};
use crate::scalar::Scalar;

use super::kkt::{rows_tr_mul, KktSolver, RowRef};
use super::nlp::{Nlp, Point};
use super::{MeritStep, ToleranceConfig};

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;
const PHASE_KAPPA: f64 = 10.0;
const DUAL_SAFEGUARD: f64 = 1e10;
/// Constraint violation above which a stalled run is declared infeasible.
pub(crate) const INFEASIBLE_VIOLATION: f64 = 1e-6;
const CURVATURE_REGULARIZATION: [f64; 8] = [0.0, 1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];
const REGULARIZATION: [f64; 8] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Termination {
    Done,
    Budget,
    Infeasible,
}

#[derive(Debug)]
pub(crate) struct Outcome<S> {
    pub z: Vec<S>,
    pub termination: Termination,
    pub iterations: usize,
}

#[derive(Clone, Copy)]
enum Mode<'a, S> {
    Barrier(S),
    Equality(&'a [usize]),
}

fn constraint_values<S: Scalar>(pt: &Point<S>, mode: Mode<'_, S>) -> Vec<S> {
    let mut c: Vec<S> = pt.rows.iter().map(|r| r.value).collect();
    if let Mode::Equality(active) = mode {
        c.extend(active.iter().map(|&k| pt.slacks[k]));
    }
    c
}

fn merit<S: Scalar>(pt: &Point<S>, mode: Mode<'_, S>, pi: S) -> Option<S> {
    let viol: S = constraint_values(pt, mode).iter().map(|v| v.abs()).sum();
    match mode {
        Mode::Barrier(mu) => {
            if pt.slacks.iter().any(|s| !(*s > S::zero())) {
                return None;
            }
            let barrier: S = pt.slacks.iter().map(|s| s.ln()).sum();
            Some(pt.objective - mu * barrier + pi * viol)
        }
        Mode::Equality(_) => Some(pt.objective + pi * viol),
    }
}

/// Gradient of the smooth part of the merit function.
fn merit_gradient<S: Scalar>(pt: &Point<S>, mode: Mode<'_, S>) -> Vec<S> {
    let mut g = pt.grad.clone();
    if let Mode::Barrier(mu) = mode {
        for (k, grads) in pt.ineq_grads.iter().enumerate() {
            let coef = mu / pt.slacks[k];
            for &(c, v) in grads {
                g[c] = g[c] - coef * v;
            }
        }
    }
    g
}

fn row_refs<'p, S: Scalar>(nlp: &Nlp<'_, S>, pt: &'p Point<S>, mode: Mode<'_, S>) -> Vec<RowRef<'p, S>> {
    let mut rows: Vec<RowRef<'p, S>> = pt.rows.iter().map(|r| RowRef { slot: r.slot, entries: &r.entries }).collect();
    if let Mode::Equality(active) = mode {
        for &k in active {
            rows.push(RowRef { slot: nlp.ineqs[k].slot(), entries: &pt.ineq_grads[k] });
        }
    }
    rows
}

/// Gauss-Newton Hessian plus the barrier term `Σ σ_k a_k a_kᵀ`.
fn hessian<S: Scalar>(pt: &Point<S>, sigma: Option<&[S]>) -> Vec<(usize, usize, S)> {
    let mut h = pt.hess.clone();
    if let Some(sigma) = sigma {
        for (k, grads) in pt.ineq_grads.iter().enumerate() {
            for &(a, ga) in grads {
                for &(b, gb) in grads {
                    h.push((a, b, sigma[k] * ga * gb));
                }
            }
        }
    }
    h
}

fn linearized_slack_change<S: Scalar>(pt: &Point<S>, dz: &[S]) -> Vec<S> {
    pt.ineq_grads.iter().map(|g| g.iter().map(|&(c, v)| v * dz[c]).sum()).collect()
}

fn fraction_to_boundary<S: Scalar>(values: &[S], changes: &[S], tau: S) -> S {
    let mut alpha = S::one();
    for (v, d) in values.iter().zip(changes) {
        if *d < S::zero() {
            alpha = alpha.min(-tau * *v / *d);
        }
    }
    alpha
}

fn axpy<S: Scalar>(z: &[S], alpha: S, d: &[S]) -> Vec<S> {
    z.iter().zip(d).map(|(a, b)| *a + alpha * *b).collect()
}

struct Step<S> {
    dz: Vec<S>,
    mult: Vec<S>,
    solver: KktSolver<S>,
    directional: S,
    pi: S,
    /// Built with the second-order Lagrangian terms.
    exact: bool,
}

/// Solves the Newton system with increasing regularization until it is
/// nonsingular and yields a descent direction for the ℓ1 merit function.
/// With `curv` the second-order Lagrangian terms are tried first and kept
/// only while they give positive curvature along the step; otherwise the
/// plain Gauss-Newton matrix is used.
fn newton_step<S: Scalar>(
    nlp: &Nlp<'_, S>,
    pt: &Point<S>,
    mode: Mode<'_, S>,
    sigma: Option<&[S]>,
    curv: Option<&[(usize, usize, S)]>,
    pi: S,
) -> Result<Step<S>> {
    let gn = hessian(pt, sigma);
    let rows = row_refs(nlp, pt, mode);
    let grad = merit_gradient(pt, mode);
    let c = constraint_values(pt, mode);
    let viol: S = c.iter().map(|v| v.abs()).sum();
    let rhs_p: Vec<S> = grad.iter().map(|v| -*v).collect();
    let rhs_d: Vec<S> = c.iter().map(|v| -*v).collect();
    let scale = pt.grad.iter().fold(S::one(), |m, v| m.max(v.abs()));
    let full = curv.map(|extra| {
        let mut h = gn.clone();
        h.extend_from_slice(extra);
        h
    });
    let attempts = full
        .iter()
        .flat_map(|h| CURVATURE_REGULARIZATION.iter().map(move |r| (h, *r, true)))
        .chain(REGULARIZATION.iter().map(|r| (&gn, *r, false)));
    for (hess, reg, exact) in attempts {
        let delta = S::lit(reg);
        let dual = delta * S::lit(1e-4);
        let solver = match KktSolver::factor(nlp, hess, &rows, delta, dual) {
            Ok(s) => s,
            Err(Error::Singular(_)) => continue,
            Err(e) => return Err(e),
        };
        let (dz, mult) = solver.solve(&rhs_p, &rhs_d);
        if dz.iter().chain(&mult).any(|v| !v.is_finite()) {
            continue;
        }
        let step_size = norm_inf(&dz);
        let tiny = step_size <= S::epsilon() * scale;
        if exact && !tiny {
            let mut hd = vec![S::zero(); dz.len()];
            for &(a, b, v) in hess.iter() {
                hd[a] = hd[a] + v * dz[b];
            }
            let bend: S = hd.iter().zip(&dz).map(|(a, b)| *a * *b).sum::<S>() + delta * dot(&dz, &dz);
            if bend <= S::lit(1e-12) * dot(&dz, &dz) {
                trace!("curvature {reg:e}: bend {:e}", bend.as_f64());
                continue;
            }
        }
        let pi = pi.min(S::lit(1.1) * norm_inf(&mult) + S::lit(1e-4)).max(norm_inf(&mult) + S::lit(1e-4));
        let slope: S = grad.iter().zip(&dz).map(|(a, b)| *a * *b).sum();
        let directional = slope - pi * viol;
        if directional < S::zero() || tiny {
            return Ok(Step { dz, mult, solver, directional, pi, exact });
        }
        trace!("regularization {reg:e} gave ascent direction {:e}", directional.as_f64());
    }
    Err(Error::Solver("Newton system could not be regularized".into()))
}

/// Backtracking on the ℓ1 merit function with one second-order correction
/// attempt at the first trial point. Returns the accepted point and step
/// length, or `None` on stall.
/// Accepted iterate, its evaluation, and the merit value.
type Trial<S> = (Vec<S>, Point<S>, S);
/// Accepted iterate and evaluation, step length, merit change.
type Accepted<S> = (Vec<S>, Point<S>, S, MeritStep<S>);

fn line_search<S: Scalar>(
    nlp: &Nlp<'_, S>,
    z: &[S],
    pt: &Point<S>,
    step: &Step<S>,
    mode: Mode<'_, S>,
    alpha_max: S,
) -> Result<Option<Accepted<S>>> {
    let Some(m0) = merit(pt, mode, step.pi) else {
        return Err(Error::Solver("merit evaluated outside the interior".into()));
    };
    let eta = S::lit(ARMIJO);
    let mut alpha = alpha_max;
    let mut first = true;
    while alpha >= S::lit(MIN_STEP) {
        let trial = axpy(z, alpha, &step.dz);
        let accepted = match nlp.eval(&trial) {
            Ok(tp) => match merit(&tp, mode, step.pi) {
                Some(m) if m <= m0 + eta * alpha * step.directional => Some((trial, tp, m)),
                _ => {
                    if first {
                        second_order_correction(nlp, &trial, &tp, step, mode, m0, alpha)?
                    } else {
                        None
                    }
                }
            },
            Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some((zt, tp, m)) = accepted {
            return Ok(Some((zt, tp, alpha, MeritStep { before: m0, after: m })));
        }
        first = false;
        alpha = alpha * S::lit(0.5);
    }
    Ok(None)
}

fn second_order_correction<S: Scalar>(
    nlp: &Nlp<'_, S>,
    trial: &[S],
    tp: &Point<S>,
    step: &Step<S>,
    mode: Mode<'_, S>,
    m0: S,
    alpha: S,
) -> Result<Option<Trial<S>>> {
    let c_trial = constraint_values(tp, mode);
    if norm_inf(&c_trial) == S::zero() {
        return Ok(None);
    }
    let zeros = vec![S::zero(); trial.len()];
    let rhs_d: Vec<S> = c_trial.iter().map(|v| -*v).collect();
    let (dc, _) = step.solver.solve(&zeros, &rhs_d);
    let corrected = axpy(trial, S::one(), &dc);
    match nlp.eval(&corrected) {
        Ok(cp) => match merit(&cp, mode, step.pi) {
            Some(m) if m <= m0 + S::lit(ARMIJO) * alpha * step.directional => Ok(Some((corrected, cp, m))),
            _ => Ok(None),
        },
        Err(Error::NonFinite(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

struct BarrierTrial<S> {
    accepted: Option<Accepted<S>>,
    full: bool,
    alpha_d: S,
    dnu: Vec<S>,
}

/// Dual step and primal line search for one barrier Newton step.
#[allow(clippy::too_many_arguments)]
fn barrier_trial<S: Scalar>(
    nlp: &Nlp<'_, S>,
    z: &[S],
    pt: &Point<S>,
    step: &Step<S>,
    mu: S,
    nu: &[S],
    sigma: &[S],
    tau: S,
) -> Result<BarrierTrial<S>> {
    let ds = linearized_slack_change(pt, &step.dz);
    let dnu: Vec<S> = (0..nu.len()).map(|k| mu / pt.slacks[k] - nu[k] - sigma[k] * ds[k]).collect();
    let alpha_p = fraction_to_boundary(&pt.slacks, &ds, tau);
    let alpha_d = fraction_to_boundary(nu, &dnu, tau);
    let accepted = line_search(nlp, z, pt, step, Mode::Barrier(mu), alpha_p)?;
    let full = accepted.as_ref().is_some_and(|a| a.2 >= alpha_p);
    Ok(BarrierTrial { accepted, full, alpha_d, dnu })
}

/// Primal-dual log-barrier loop over the geometric barrier schedule.
pub(crate) fn barrier_loop<S: Scalar>(
    nlp: &Nlp<'_, S>,
    z0: Vec<S>,
    tol: &ToleranceConfig,
    trace_out: &mut Vec<MeritStep<S>>,
) -> Result<(Outcome<S>, Vec<S>)> {
    let mut z = z0;
    let mut pt = nlp.eval(&z)?;
    if pt.slacks.iter().any(|s| !(*s > S::zero())) {
        return Err(Error::Solver("barrier start is not strictly interior".into()));
    }
    let mut mu = S::lit(tol.mu_init);
    let mu_min = S::lit(tol.mu_min);
    let mut nu: Vec<S> = pt.slacks.iter().map(|s| mu / *s).collect();
    let mut pi = S::one();
    let mut iterations = 0usize;
    let mut stall_ref = pt.constraint_norm_inf();
    let mut stall_count = 0usize;
    let mut lam: Option<Vec<S>> = None;
    loop {
        let tau = S::lit(0.99).max(S::one() - mu);
        // inner iterations at fixed μ
        loop {
            if iterations >= tol.max_iter {
                return Ok((Outcome { z, termination: Termination::Budget, iterations }, nu));
            }
            let sigma: Vec<S> = nu.iter().zip(&pt.slacks).map(|(n, s)| *n / *s).collect();
            let curv = match &lam {
                Some(l) => Some(nlp.curvature(&z, l, &nu)?),
                None => None,
            };
            let mut step = newton_step(nlp, &pt, Mode::Barrier(mu), Some(&sigma), curv.as_deref(), pi)?;
            let rows = row_refs(nlp, &pt, Mode::Barrier(mu));
            let jt = rows_tr_mul(&rows, &step.mult, nlp.nv());
            let mut stat = S::zero();
            let mut at_nu = vec![S::zero(); nlp.nv()];
            for (k, grads) in pt.ineq_grads.iter().enumerate() {
                for &(c, v) in grads {
                    at_nu[c] = at_nu[c] + v * nu[k];
                }
            }
            for c in 0..nlp.nv() {
                stat = stat.max((pt.grad[c] + jt[c] - at_nu[c]).abs());
            }
            let comp = nu.iter().zip(&pt.slacks).fold(S::zero(), |m, (n, s)| m.max((*n * *s - mu).abs()));
            let feas = pt.constraint_norm_inf();
            let err = stat.max(comp).max(feas);
            if err <= S::lit(PHASE_KAPPA) * mu && feas <= S::lit(PHASE_KAPPA) * mu.max(S::lit(tol.tol_feas)) {
                break;
            }
            let mut trial = barrier_trial(nlp, &z, &pt, &step, mu, &nu, &sigma, tau)?;
            // second-order steps are kept only when they are taken in full
            if step.exact && !trial.full {
                trace!("exact step cut to {:?}", trial.accepted.as_ref().map(|a| a.2.as_f64()));
                step = newton_step(nlp, &pt, Mode::Barrier(mu), Some(&sigma), None, pi)?;
                trial = barrier_trial(nlp, &z, &pt, &step, mu, &nu, &sigma, tau)?;
            }
            pi = step.pi;
            lam = Some(step.mult.clone());
            let (alpha_d, dnu) = (trial.alpha_d, trial.dnu);
            match trial.accepted {
                Some((zt, tp, alpha, record)) => {
                    z = zt;
                    pt = tp;
                    for k in 0..nu.len() {
                        let v = nu[k] + alpha_d * dnu[k];
                        let lo = mu / (S::lit(DUAL_SAFEGUARD) * pt.slacks[k]);
                        let hi = S::lit(DUAL_SAFEGUARD) * mu / pt.slacks[k];
                        nu[k] = v.max(lo).min(hi);
                    }
                    trace_out.push(record);
                    iterations += 1;
                    trace!(
                        "mu {:e} alpha {:e} |dz| {:e} feas {:e} err {:e} exact {}",
                        mu.as_f64(),
                        alpha.as_f64(),
                        norm_inf(&step.dz).as_f64(),
                        feas.as_f64(),
                        err.as_f64(),
                        step.exact
                    );
                }
                None => {
                    iterations += 1;
                    if feas > S::lit(INFEASIBLE_VIOLATION) {
                        let (zr, used, ok) = restore(nlp, &z, true, tol.max_iter.saturating_sub(iterations).max(1))?;
                        iterations += used;
                        if !ok {
                            return Ok((Outcome { z: zr, termination: Termination::Infeasible, iterations }, nu));
                        }
                        z = zr;
                        pt = nlp.eval(&z)?;
                        nu = pt.slacks.iter().map(|s| mu / *s).collect();
                        continue;
                    }
                    debug!("barrier phase mu = {:e} stalled at err {:e}", mu.as_f64(), err.as_f64());
                    break;
                }
            }
            // slow progress on feasibility signals incompatible constraints
            let feas_now = pt.constraint_norm_inf();
            if feas_now > S::lit(INFEASIBLE_VIOLATION) {
                if feas_now < S::lit(0.5) * stall_ref {
                    stall_ref = feas_now;
                    stall_count = 0;
                } else {
                    stall_count += 1;
                }
                if stall_count >= 25 {
                    let (zr, used, ok) = restore(nlp, &z, true, tol.max_iter.saturating_sub(iterations).max(1))?;
                    iterations += used;
                    if !ok {
                        return Ok((Outcome { z: zr, termination: Termination::Infeasible, iterations }, nu));
                    }
                    z = zr;
                    pt = nlp.eval(&z)?;
                    nu = pt.slacks.iter().map(|s| mu / *s).collect();
                    stall_ref = pt.constraint_norm_inf();
                    stall_count = 0;
                }
            }
        }
        if mu <= mu_min {
            break;
        }
        mu = mu * S::lit(tol.mu_factor);
    }
    Ok((Outcome { z, termination: Termination::Done, iterations }, nu))
}

/// Gauss-Newton SQP with the inequalities in `active` imposed as equalities
/// and the rest ignored. Returns the final point and the multipliers of the
/// active rows (`λ` for `s_k = 0`, so `ν_k = −λ_k`).
pub(crate) fn equality_sqp<S: Scalar>(
    nlp: &Nlp<'_, S>,
    z0: Vec<S>,
    active: &[usize],
    budget: usize,
    tol: &ToleranceConfig,
    trace_out: &mut Vec<MeritStep<S>>,
) -> Result<(Outcome<S>, Vec<S>)> {
    let mode = Mode::Equality(active);
    let mut z = z0;
    let mut pt = nlp.eval(&z)?;
    let mut pi = S::one();
    let mut iterations = 0usize;
    let mut last_active = vec![S::zero(); active.len()];
    let neq = pt.rows.len();
    let mut lam: Option<Vec<S>> = None;
    loop {
        let curv = match &lam {
            Some(l) => {
                let mut nu = vec![S::zero(); nlp.ineqs.len()];
                for (k, m) in active.iter().zip(&l[neq..]) {
                    nu[*k] = -*m;
                }
                Some(nlp.curvature(&z, &l[..neq], &nu)?)
            }
            None => None,
        };
        let mut step = newton_step(nlp, &pt, mode, None, curv.as_deref(), pi)?;
        last_active = step.mult[neq..].to_vec();
        let rows = row_refs(nlp, &pt, mode);
        let jt = rows_tr_mul(&rows, &step.mult, nlp.nv());
        let stat = pt.grad.iter().zip(&jt).fold(S::zero(), |m, (a, b)| m.max((*a + *b).abs()));
        let feas = norm_inf(&constraint_values(&pt, mode));
        if stat <= S::lit(0.1 * tol.tol_kkt) && feas <= S::lit(0.1 * tol.tol_feas) {
            return Ok((Outcome { z, termination: Termination::Done, iterations }, last_active));
        }
        let zscale = norm_inf(&z).max(S::one());
        if norm_inf(&step.dz) <= S::epsilon() * S::lit(4.0) * zscale && feas <= S::lit(tol.tol_feas) {
            return Ok((Outcome { z, termination: Termination::Done, iterations }, last_active));
        }
        if iterations >= budget {
            return Ok((Outcome { z, termination: Termination::Budget, iterations }, last_active));
        }
        let mut accepted = line_search(nlp, &z, &pt, &step, mode, S::one())?;
        if step.exact && accepted.as_ref().is_none_or(|a| a.2 < S::one()) {
            step = newton_step(nlp, &pt, mode, None, None, pi)?;
            accepted = line_search(nlp, &z, &pt, &step, mode, S::one())?;
        }
        pi = step.pi;
        lam = Some(step.mult.clone());
        match accepted {
            Some((zt, tp, _, record)) => {
                z = zt;
                pt = tp;
                trace_out.push(record);
                iterations += 1;
            }
            None => {
                iterations += 1;
                if feas > S::lit(INFEASIBLE_VIOLATION) && active.is_empty() {
                    let (zr, used, ok) = restore(nlp, &z, false, budget.saturating_sub(iterations).max(1))?;
                    iterations += used;
                    if !ok {
                        return Ok((Outcome { z: zr, termination: Termination::Infeasible, iterations }, last_active));
                    }
                    z = zr;
                    pt = nlp.eval(&z)?;
                    continue;
                }
                let termination = if feas > S::lit(tol.tol_feas) { Termination::Budget } else { Termination::Done };
                return Ok((Outcome { z, termination, iterations }, last_active));
            }
        }
    }
}

/// Levenberg-Marquardt minimization of `½|c(z)|²` over the equality rows,
/// optionally keeping every inequality slack strictly positive. Returns the
/// point, iterations used and whether the violation fell to
/// [`INFEASIBLE_VIOLATION`].
pub(crate) fn restore<S: Scalar>(nlp: &Nlp<'_, S>, z0: &[S], interior: bool, budget: usize) -> Result<(Vec<S>, usize, bool)> {
    let mut z = z0.to_vec();
    let mut pt = nlp.eval(&z)?;
    let mut lm = S::lit(1e-4);
    let mut used = 0;
    let target = S::lit(INFEASIBLE_VIOLATION * 1e-3);
    let mut stalls = 0;
    while used < budget {
        let c: Vec<S> = pt.rows.iter().map(|r| r.value).collect();
        let theta = norm_inf(&c);
        if theta <= target {
            break;
        }
        let rows: Vec<RowRef<'_, S>> = pt.rows.iter().map(|r| RowRef { slot: r.slot, entries: &r.entries }).collect();
        let solver = KktSolver::factor(nlp, &[], &rows, lm, S::one())?;
        let zeros = vec![S::zero(); z.len()];
        let rhs_d: Vec<S> = c.iter().map(|v| -*v).collect();
        let (dz, _) = solver.solve(&zeros, &rhs_d);
        let alpha_max = if interior {
            fraction_to_boundary(&pt.slacks, &linearized_slack_change(&pt, &dz), S::lit(0.99))
        } else {
            S::one()
        };
        let phi0: S = c.iter().map(|v| *v * *v).sum();
        let mut alpha = alpha_max;
        let mut accepted = None;
        while alpha >= S::lit(MIN_STEP) {
            let trial = axpy(&z, alpha, &dz);
            if let Ok(tp) = nlp.eval(&trial) {
                let phi: S = tp.rows.iter().map(|r| r.value * r.value).sum();
                let interior_ok = !interior || tp.slacks.iter().all(|s| *s > S::zero());
                if interior_ok && phi <= phi0 * (S::one() - S::lit(ARMIJO) * alpha) {
                    accepted = Some((trial, tp, phi));
                    break;
                }
            }
            alpha = alpha * S::lit(0.5);
        }
        used += 1;
        match accepted {
            Some((zt, tp, phi)) => {
                if phi > phi0 * S::lit(0.999) {
                    stalls += 1;
                } else {
                    stalls = 0;
                }
                z = zt;
                pt = tp;
                lm = (lm * S::lit(0.1)).max(S::lit(1e-12));
            }
            None => {
                lm = lm * S::lit(100.0);
                stalls += 1;
            }
        }
        if stalls >= 10 || lm > S::lit(1e8) {
            break;
        }
    }
    let ok = pt.constraint_norm_inf() <= S::lit(INFEASIBLE_VIOLATION);
    debug!("restoration ended after {used} iterations, violation {:e}", pt.constraint_norm_inf().as_f64());
    Ok((z, used, ok))
}
