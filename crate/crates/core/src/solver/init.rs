//! Initial guesses: the deterministic default initializer and warm starts
//! from overlapping solutions.

use crate::cost::EstimateTrajectory;
use crate::error::Result;
use crate::linalg::{cholesky, solve_dense, Mat};
use crate::scalar::Scalar;
use crate::system_model::{BoxSet, SystemModel};

use super::ProblemSpec;

/// Interior margin for one coordinate of a box.
fn margin<S: Scalar>(lo: S, hi: S) -> S {
    if lo.is_finite() && hi.is_finite() {
        (hi - lo) * S::lit(0.01)
    } else {
        let b = if lo.is_finite() { lo } else { hi };
        S::lit(1e-2) * b.abs().max(S::one())
    }
}

fn push_inside<S: Scalar>(v: &mut [S], bx: &BoxSet<S>) {
    for i in 0..v.len() {
        let (lo, hi) = (bx.lower()[i], bx.upper()[i]);
        let m = margin(lo, hi);
        if lo.is_finite() && v[i] < lo + m {
            v[i] = lo + m;
        }
        if hi.is_finite() && v[i] > hi - m {
            v[i] = hi - m;
        }
    }
}

fn inside_strictly<S: Scalar>(v: &[S], bx: &BoxSet<S>) -> bool {
    v.iter().enumerate().all(|(i, x)| {
        (!bx.lower()[i].is_finite() || *x > bx.lower()[i]) && (!bx.upper()[i].is_finite() || *x < bx.upper()[i])
    })
}

/// Minimum-norm `dx` with `H dx = r` (`H` is `p×n`), or `None` when `HHᵀ`
/// is singular.
fn min_norm_correction<S: Scalar>(h: &Mat<S>, r: &[S]) -> Option<Vec<S>> {
    let hht = h.matmul(&h.transpose());
    let y = solve_dense(&hht, r).ok()?;
    Some(h.tr_mul_vec(&y))
}

/// Moves `x` so that the output residual `y − h(x,u)` lies strictly inside
/// the noise box.
fn fit_noise_box<S: Scalar>(model: &SystemModel<S>, x: &mut [S], u: &[S], y: &[S], noise: &BoxSet<S>) -> Result<()> {
    for _ in 0..20 {
        let hx = model.h(x, u)?;
        let r: Vec<S> = y.iter().zip(&hx).map(|(a, b)| *a - *b).collect();
        if inside_strictly(&r, noise) {
            return Ok(());
        }
        let mut target = r.clone();
        push_inside(&mut target, noise);
        // want h(x + dx) ≈ y − target
        let need: Vec<S> = r.iter().zip(&target).map(|(a, b)| *a - *b).collect();
        let hj = model.output_jacobian(x, u);
        match min_norm_correction(&hj, &need) {
            Some(dx) => {
                for (xi, d) in x.iter_mut().zip(dx) {
                    *xi = *xi + d;
                }
            }
            None => return Ok(()),
        }
    }
    Ok(())
}

/// Least-squares state estimate from a single measurement: Gauss-Newton on
/// `|y − h(x,u)|²` when `HᵀH` is positive definite at the prior, else the
/// prior plus the minimum-norm measurement correction.
fn state_from_measurement<S: Scalar>(model: &SystemModel<S>, u: &[S], y: &[S]) -> Result<Vec<S>> {
    let mut x = model.prior().to_vec();
    let h0 = model.output_jacobian(&x, u);
    let hth = h0.transpose().matmul(&h0);
    if cholesky(&hth).is_some() {
        for _ in 0..20 {
            let hx = model.h(&x, u)?;
            let r: Vec<S> = y.iter().zip(&hx).map(|(a, b)| *a - *b).collect();
            let hj = model.output_jacobian(&x, u);
            let Ok(dx) = solve_dense(&hj.transpose().matmul(&hj), &hj.tr_mul_vec(&r)) else {
                break;
            };
            let step = dx.iter().fold(S::zero(), |m, v| m.max(v.abs()));
            for (xi, d) in x.iter_mut().zip(dx) {
                *xi = *xi + d;
            }
            if step <= S::epsilon() * S::lit(16.0) {
                break;
            }
        }
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
        x = model.prior().to_vec();
    }
    let hx = model.h(&x, u)?;
    let r: Vec<S> = y.iter().zip(&hx).map(|(a, b)| *a - *b).collect();
    if let Some(dx) = min_norm_correction(&h0, &r) {
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi = *xi + d;
        }
    }
    Ok(x)
}

/// Deterministic starting trajectory: `x_0` from the first measurement (or
/// the initial pin), forward simulation with `w = 0`, each point nudged
/// strictly inside the state, disturbance and noise boxes.
pub fn default_initializer<S: Scalar>(spec: &ProblemSpec<S>) -> Result<EstimateTrajectory<S>> {
    spec.validate()?;
    let model = &spec.model;
    let data = &spec.data;
    let sets = &spec.sets;
    let horizon = data.horizon();
    let x0 = match &spec.pin_initial {
        Some(pin) => pin.clone(),
        None => state_from_measurement(model, data.u(0), data.y(0))?,
    };
    let mut w0 = vec![S::zero(); model.q()];
    push_inside(&mut w0, &sets.disturbances);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut dist = Vec::with_capacity(horizon);
    states.push(x0);
    for j in 0..=horizon {
        let pinned = (j == 0 && spec.pin_initial.is_some()) || (j == horizon && spec.pin_terminal.is_some());
        if j == horizon {
            if let Some(pin) = &spec.pin_terminal {
                states[j] = pin.clone();
            }
        }
        if !pinned {
            let mut x = states[j].clone();
            fit_noise_box(model, &mut x, data.u(j), data.y(j), &sets.noise)?;
            push_inside(&mut x, &sets.states);
            states[j] = x;
        }
        if j < horizon {
            let next = model.f(&states[j], data.u(j), &w0)?;
            let next = if next.iter().all(|v| v.is_finite()) { next } else { states[j].clone() };
            states.push(next);
            dist.push(w0.clone());
        }
    }
    EstimateTrajectory::new(states, dist)
}

/// Initializer for `spec` that copies the points of `overlap` falling inside
/// the window and extends past them by forward simulation with `w = 0`.
///
/// `shift` is the absolute index of the window start minus the absolute
/// index of `overlap`'s first state. Indices before the copied range keep
/// the default initializer's values.
pub fn warm_start_from<S: Scalar>(
    overlap: &EstimateTrajectory<S>,
    shift: i64,
    spec: &ProblemSpec<S>,
) -> Result<EstimateTrajectory<S>> {
    let base = default_initializer(spec)?;
    let horizon = spec.data.horizon();
    let n = spec.model.n();
    let q = spec.model.q();
    if overlap.states().first().is_none_or(|x| x.len() != n) {
        return Ok(base);
    }
    let (mut states, mut dist) = base.into_parts();
    let mut last_copied = None;
    for j in 0..=horizon {
        let k = j as i64 + shift;
        if k < 0 || k > overlap.horizon() as i64 {
            continue;
        }
        let k = k as usize;
        states[j] = overlap.x(k).to_vec();
        if j < horizon {
            if k < overlap.horizon() && overlap.w(k).len() == q {
                dist[j] = overlap.w(k).to_vec();
            } else {
                dist[j] = vec![S::zero(); q];
            }
        }
        last_copied = Some(j);
    }
    let Some(last) = last_copied else {
        return EstimateTrajectory::new(states, dist);
    };
    // The disturbance leaving the last copied state was not part of the
    // overlap's decision when it ended there.
    let zero_w = vec![S::zero(); q];
    if last < horizon && last as i64 + shift == overlap.horizon() as i64 {
        dist[last] = zero_w.clone();
    }
    for j in last..horizon {
        if j > last {
            dist[j] = zero_w.clone();
        }
        states[j + 1] = spec.model.f(&states[j], spec.data.u(j), &dist[j])?;
    }
    EstimateTrajectory::new(states, dist)
}

/// Copy of `traj` with every unpinned point moved strictly inside the boxes
/// of `spec` (used before the barrier loop starts).
pub(crate) fn make_interior<S: Scalar>(spec: &ProblemSpec<S>, traj: &EstimateTrajectory<S>) -> Result<EstimateTrajectory<S>> {
    let horizon = spec.data.horizon();
    let (mut states, mut dist) = traj.clone().into_parts();
    for (j, x) in states.iter_mut().enumerate() {
        let pinned = (j == 0 && spec.pin_initial.is_some()) || (j == horizon && spec.pin_terminal.is_some());
        if !pinned {
            fit_noise_box(&spec.model, x, spec.data.u(j), spec.data.y(j), &spec.sets.noise)?;
            push_inside(x, &spec.sets.states);
        }
    }
    for w in dist.iter_mut() {
        push_inside(w, &spec.sets.disturbances);
    }
    EstimateTrajectory::new(states, dist)
}
