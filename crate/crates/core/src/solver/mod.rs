//! Constrained nonlinear least-squares solver for the full-information,
//! truncated-window and pinned-endpoint estimation problems.
//!
//! The decision vector is the whole trajectory `(x_0, w_0, …, x_N)` with the
//! dynamics as equality constraints. Box constraints on states,
//! disturbances and output residuals go through a primal-dual log barrier
//! driven from `μ = 1` down to `1e-9`; the final active set is then polished
//! with an equality-constrained Gauss-Newton SQP so that the returned point
//! can be certified by [`kkt_residual`].

mod init;
mod ipm;
mod kkt;
mod nlp;

use serde::{Deserialize, Serialize};

use crate::cost::{total_cost, CostWeights, EstimateTrajectory};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::system_model::{ConstraintSets, DataBatch, SystemModel};

pub use init::{default_initializer, warm_start_from};
pub use kkt::{kkt_residual, ACTIVE_SLACK};

use ipm::Termination;
use nlp::Nlp;

/// Stopping rules and barrier schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceConfig {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub mu_init: f64,
    pub mu_factor: f64,
    pub mu_min: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { tol_kkt: 1e-8, tol_feas: 1e-8, max_iter: 200, mu_init: 1.0, mu_factor: 0.2, mu_min: 1e-9 }
    }
}

impl ToleranceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tol_kkt > 0.0
            && self.tol_feas > 0.0
            && self.max_iter > 0
            && self.mu_init > 0.0
            && self.mu_factor > 0.0
            && self.mu_factor < 1.0
            && self.mu_min > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid tolerances {self:?}")))
        }
    }
}

/// One estimation problem: data window, model, sets, weights and optional
/// endpoint pins.
#[derive(Debug, Clone)]
pub struct ProblemSpec<S: Scalar> {
    pub data: DataBatch<S>,
    pub model: SystemModel<S>,
    pub sets: ConstraintSets<S>,
    pub weights: CostWeights<S>,
    pub pin_initial: Option<Vec<S>>,
    pub pin_terminal: Option<Vec<S>>,
}

impl<S: Scalar> ProblemSpec<S> {
    pub fn new(data: DataBatch<S>, model: SystemModel<S>, sets: ConstraintSets<S>, weights: CostWeights<S>) -> Result<Self> {
        let spec = Self { data, model, sets, weights, pin_initial: None, pin_terminal: None };
        spec.validate()?;
        Ok(spec)
    }

    /// Same problem with `x_0 = x^i` and `x_N = x^t` imposed.
    pub fn with_pins(mut self, pin_initial: Option<Vec<S>>, pin_terminal: Option<Vec<S>>) -> Result<Self> {
        self.pin_initial = pin_initial;
        self.pin_terminal = pin_terminal;
        self.validate()?;
        Ok(self)
    }

    pub fn horizon(&self) -> usize {
        self.data.horizon()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model.dims();
        if self.data.is_empty() {
            return Err(Error::Length("empty data window".into()));
        }
        if self.data.input_dim() != d.m || self.data.output_dim() != d.p {
            return Err(Error::Dimension(format!(
                "data has m = {}, p = {}; model has m = {}, p = {}",
                self.data.input_dim(),
                self.data.output_dim(),
                d.m,
                d.p
            )));
        }
        let s = &self.sets;
        if s.states.dim() != d.n || s.inputs.dim() != d.m || s.disturbances.dim() != d.q || s.noise.dim() != d.p {
            return Err(Error::Dimension("constraint sets do not match the model".into()));
        }
        if self.weights.disturbance_dim() != d.q || self.weights.output_dim() != d.p {
            return Err(Error::Dimension("weights do not match the model".into()));
        }
        for (label, bx) in [("X", &s.states), ("W", &s.disturbances), ("V", &s.noise)] {
            for i in 0..bx.dim() {
                if !(bx.lower()[i] < bx.upper()[i]) {
                    return Err(Error::InvalidArgument(format!("{label} has an empty interior in coordinate {i}")));
                }
            }
        }
        for (label, pin) in [("initial", &self.pin_initial), ("terminal", &self.pin_terminal)] {
            if let Some(p) = pin {
                if p.len() != d.n {
                    return Err(Error::Dimension(format!("{label} pin of dim {} for n = {}", p.len(), d.n)));
                }
                if !s.states.contains(p)? {
                    return Err(Error::ConstraintViolation(format!("{label} pin outside X")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

/// Merit value before and after one accepted step (same barrier parameter
/// and penalty on both sides).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritStep<S> {
    pub before: S,
    pub after: S,
}

#[derive(Debug, Clone)]
pub struct SolveReport<S> {
    pub trajectory: EstimateTrajectory<S>,
    /// Total cost of `trajectory`.
    pub objective: S,
    pub kkt_residual: S,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Largest equality residual or bound violation at `trajectory`.
    pub constraint_violation: S,
    pub merit_trace: Vec<MeritStep<S>>,
}

impl<S: Scalar> SolveReport<S> {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn require_converged(self) -> Result<Self> {
        if self.is_converged() {
            Ok(self)
        } else {
            Err(Error::Solver(format!(
                "solve ended with status {:?} (kkt {:e}, violation {:e}, {} iterations)",
                self.status,
                self.kkt_residual.as_f64(),
                self.constraint_violation.as_f64(),
                self.iterations
            )))
        }
    }

    pub fn to_doc(&self) -> SolveReportDoc {
        let conv = |v: &Vec<S>| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        SolveReportDoc {
            status: self.status,
            objective: self.objective.as_f64(),
            kkt_residual: self.kkt_residual.as_f64(),
            constraint_violation: self.constraint_violation.as_f64(),
            iterations: self.iterations,
            states: self.trajectory.states().iter().map(conv).collect(),
            disturbances: self.trajectory.disturbances().iter().map(conv).collect(),
        }
    }
}

/// JSON form of a [`SolveReport`], trajectory inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReportDoc {
    pub status: SolveStatus,
    pub objective: f64,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub iterations: usize,
    pub states: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
}

fn violation<S: Scalar>(nlp: &Nlp<'_, S>, z: &[S]) -> Result<S> {
    let pt = nlp.eval(z)?;
    Ok(pt.constraint_norm_inf().max(pt.slacks.iter().fold(S::zero(), |a, s| a.max(-*s))))
}

/// Solves the problem described by `spec` from `init` (or the default
/// initializer).
pub fn solve<S: Scalar>(
    spec: &ProblemSpec<S>,
    init: Option<&EstimateTrajectory<S>>,
    tol: &ToleranceConfig,
) -> Result<SolveReport<S>> {
    spec.validate()?;
    tol.validate()?;
    let start = match init {
        Some(t) => {
            if t.horizon() != spec.horizon()
                || t.states().iter().any(|x| x.len() != spec.model.n())
                || t.disturbances().iter().any(|w| w.len() != spec.model.q())
            {
                return Err(Error::Dimension("initial trajectory does not match the problem".into()));
            }
            init::make_interior(spec, t)?
        }
        None => default_initializer(spec)?,
    };
    let nlp = Nlp::new(spec);
    let mut z = nlp.pack(&start);
    if let Some(pin) = &spec.pin_initial {
        z[..pin.len()].copy_from_slice(pin);
    }
    let mut merit_trace = Vec::new();
    let mut iterations = 0;
    let mut termination;
    if nlp.ineqs.is_empty() {
        let (out, _) = ipm::equality_sqp(&nlp, z, &[], tol.max_iter, tol, &mut merit_trace)?;
        z = out.z;
        iterations += out.iterations;
        termination = out.termination;
    } else {
        let (out, nu) = ipm::barrier_loop(&nlp, z, tol, &mut merit_trace)?;
        z = out.z;
        iterations += out.iterations;
        termination = out.termination;
        if termination == Termination::Done {
            let (zp, used, ok) = polish(spec, &nlp, &z, &nu, tol, &mut merit_trace)?;
            iterations += used;
            if ok {
                z = zp;
            }
        }
    }
    let trajectory = nlp.unpack(&z);
    let kkt = kkt_residual(spec, &trajectory)?;
    let viol = violation(&nlp, &z)?;
    if termination != Termination::Infeasible && viol > S::lit(ipm::INFEASIBLE_VIOLATION) {
        // confirm with a restoration attempt before calling it infeasible
        let (_, used, ok) = ipm::restore(&nlp, &z, false, 50)?;
        iterations += used;
        if !ok {
            termination = Termination::Infeasible;
        }
    }
    let status = match termination {
        Termination::Infeasible => SolveStatus::Infeasible,
        _ if kkt <= S::lit(tol.tol_kkt) && viol <= S::lit(tol.tol_feas) => SolveStatus::Converged,
        _ => SolveStatus::MaxIter,
    };
    let objective = total_cost(&spec.weights, &trajectory, &spec.data, &spec.model)?;
    log::debug!(
        "solve N = {}: {:?} after {} iterations, kkt {:e}",
        spec.horizon(),
        status,
        iterations,
        kkt.as_f64()
    );
    Ok(SolveReport { trajectory, objective, kkt_residual: kkt, iterations, status, constraint_violation: viol, merit_trace })
}

/// Active-set refinement of a barrier solution. Returns the refined point,
/// the iterations spent and whether it certifies better than the input.
fn polish<S: Scalar>(
    spec: &ProblemSpec<S>,
    nlp: &Nlp<'_, S>,
    z: &[S],
    nu: &[S],
    tol: &ToleranceConfig,
    trace: &mut Vec<MeritStep<S>>,
) -> Result<(Vec<S>, usize, bool)> {
    let pt = nlp.eval(z)?;
    let mut active: Vec<usize> = (0..nu.len()).filter(|&k| nu[k] >= pt.slacks[k]).collect();
    let mut used = 0;
    let mut best = None;
    for _ in 0..6 {
        let mut scratch = Vec::new();
        let (out, lam) = ipm::equality_sqp(nlp, z.to_vec(), &active, 50, tol, &mut scratch)?;
        used += out.iterations;
        if out.termination == Termination::Infeasible {
            break;
        }
        let pp = nlp.eval(&out.z)?;
        let add: Vec<usize> = (0..pp.slacks.len())
            .filter(|k| !active.contains(k) && pp.slacks[*k] < -S::lit(tol.tol_feas))
            .collect();
        let remove: Vec<usize> =
            active.iter().enumerate().filter(|(i, _)| -lam[*i] < -S::lit(tol.tol_kkt)).map(|(_, k)| *k).collect();
        best = Some((out.z, scratch));
        if add.is_empty() && remove.is_empty() {
            break;
        }
        active.retain(|k| !remove.contains(k));
        active.extend(add);
        active.sort_unstable();
    }
    let Some((zp, scratch)) = best else {
        return Ok((z.to_vec(), used, false));
    };
    let before = kkt_residual(spec, &nlp.unpack(z))?;
    let after = kkt_residual(spec, &nlp.unpack(&zp))?;
    if after <= before {
        trace.extend(scratch);
        Ok((zp, used, true))
    } else {
        Ok((z.to_vec(), used, false))
    }
}
