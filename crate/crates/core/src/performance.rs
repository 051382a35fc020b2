//! Performance of candidate estimates against the full-information optimum:
//! costs and gaps, the non-averaged performance bound built from a fitted
//! turnpike envelope, linear-growth constants of the optimal value, and
//! state accuracy.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cost::{total_cost, CostWeights, EstimateTrajectory};
use crate::error::{Error, Result};
use crate::linalg::{dist, Mat};
use crate::scalar::Scalar;
use crate::solver::SolveReport;
use crate::system_model::{BoxSet, ConstraintSets, DataBatch, SystemModel};
use crate::turnpike::EnvelopeFit;

/// Largest box dimension accepted by the vertex enumeration.
pub const MAX_VERTEX_DIM: usize = 8;

/// Defect tolerance for calling a candidate dynamically feasible.
const FEASIBILITY_TOL: f64 = 1e-6;

/// Cost and accuracy of one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfReport<S> {
    pub j_candidate: S,
    pub v_t: S,
    pub gap: S,
    pub gap_relative: S,
    /// `J / T` (equal to `J` when `T = 0`).
    pub averaged: S,
    pub bound: Option<S>,
    /// `bound ≥ J`, when a bound is attached.
    pub bound_valid: Option<bool>,
    pub sne: Option<S>,
}

impl<S: Scalar> PerfReport<S> {
    /// Attaches a bound and its validity flag.
    pub fn with_bound(mut self, bound: S) -> Self {
        self.bound = Some(bound);
        self.bound_valid = Some(bound >= self.j_candidate);
        self
    }

    pub fn to_doc(&self) -> PerfDoc {
        PerfDoc {
            j_candidate: self.j_candidate.as_f64(),
            v_t: self.v_t.as_f64(),
            gap: self.gap.as_f64(),
            gap_relative: self.gap_relative.as_f64(),
            averaged: self.averaged.as_f64(),
            bound: self.bound.map(|b| b.as_f64()),
            bound_valid: self.bound_valid,
            sne: self.sne.map(|s| s.as_f64()),
        }
    }
}

/// JSON form of [`PerfReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfDoc {
    pub j_candidate: f64,
    pub v_t: f64,
    pub gap: f64,
    pub gap_relative: f64,
    pub averaged: f64,
    pub bound: Option<f64>,
    pub bound_valid: Option<bool>,
    pub sne: Option<f64>,
}

/// Sum of normed errors `Σ_j |x̂_j − x_j|`.
pub fn sne<S: Scalar>(estimate: &[Vec<S>], truth: &[Vec<S>]) -> Result<S> {
    if estimate.len() != truth.len() {
        return Err(Error::Length(format!("{} estimates vs {} true states", estimate.len(), truth.len())));
    }
    if estimate.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Dimension("estimate and true state dimensions differ".into()));
    }
    Ok(estimate.iter().zip(truth).map(|(a, b)| dist(a, b)).sum())
}

/// Cost gap of `candidate` to the optimum in `reference`, with SNE when
/// the true states are known.
pub fn perf_report<S: Scalar>(
    candidate: &EstimateTrajectory<S>,
    reference: &SolveReport<S>,
    data: &DataBatch<S>,
    weights: &CostWeights<S>,
    model: &SystemModel<S>,
    true_states: Option<&[Vec<S>]>,
) -> Result<PerfReport<S>> {
    let horizon = reference.trajectory.horizon();
    if candidate.horizon() != horizon || data.horizon() != horizon {
        return Err(Error::Length(format!(
            "candidate horizon {}, reference {}, data {}",
            candidate.horizon(),
            horizon,
            data.horizon()
        )));
    }
    if !candidate.is_dynamically_feasible(model, data, S::lit(FEASIBILITY_TOL))? {
        return Err(Error::ConstraintViolation("candidate violates the dynamics".into()));
    }
    let j = total_cost(weights, candidate, data, model)?;
    let v = reference.objective;
    let gap = j - v;
    let averaged = if horizon == 0 { j } else { j / S::lit(horizon as f64) };
    let sne = true_states.map(|t| sne(candidate.states(), t)).transpose()?;
    Ok(PerfReport {
        j_candidate: j,
        v_t: v,
        gap,
        gap_relative: gap / v.max(S::lit(1e-12)),
        averaged,
        bound: None,
        bound_valid: None,
        sne,
    })
}

/// Lipschitz constants and weight eigenvalues entering the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants<S> {
    pub l_f: S,
    pub l_h: S,
    pub lambda_q: S,
    pub lambda_r: S,
    /// `λ_max(G)`, or `0` when the terminal cost is off.
    pub lambda_g: S,
}

impl<S: Scalar> BoundConstants<S> {
    pub fn new(model: &SystemModel<S>, weights: &CostWeights<S>) -> Self {
        let lambda_g = if weights.active_terminal().is_some() { weights.lambda_max_g() } else { S::zero() };
        Self {
            l_f: model.lipschitz_f(),
            l_h: model.lipschitz_h(),
            lambda_q: weights.lambda_max_q(),
            lambda_r: weights.lambda_max_r(),
            lambda_g,
        }
    }
}

/// `σ(s) = 2 β̂(s/2)`.
pub fn sigma<S: Scalar>(envelope: &EnvelopeFit<S>, s: S) -> S {
    S::lit(2.0) * envelope.beta(s / S::lit(2.0))
}

/// `σ₁(N) = ((1 + L_f)² λ_Q² + L_h² λ_R²) σ(N)²`.
pub fn sigma1<S: Scalar>(k: &BoundConstants<S>, envelope: &EnvelopeFit<S>, len: usize) -> S {
    let s = sigma(envelope, S::lit(len as f64));
    let one_lf = S::one() + k.l_f;
    (one_lf * one_lf * k.lambda_q * k.lambda_q + k.l_h * k.l_h * k.lambda_r * k.lambda_r) * s * s
}

/// `σ₂(N) = L_h² λ_G² σ(N)²`.
pub fn sigma2<S: Scalar>(k: &BoundConstants<S>, envelope: &EnvelopeFit<S>, len: usize) -> S {
    let s = sigma(envelope, S::lit(len as f64));
    k.l_h * k.l_h * k.lambda_g * k.lambda_g * s * s
}

/// `(1+ε) V_T + (1+ε)/ε · (T σ₁(N) + σ₂(N))`.
pub fn theorem4_bound<S: Scalar>(
    epsilon: S,
    len: usize,
    horizon: usize,
    envelope: &EnvelopeFit<S>,
    constants: &BoundConstants<S>,
    v_t: S,
) -> Result<S> {
    if !(epsilon > S::zero()) {
        return Err(Error::InvalidArgument("bound needs ε > 0".into()));
    }
    let one_eps = S::one() + epsilon;
    let tail = S::lit(horizon as f64) * sigma1(constants, envelope, len) + sigma2(constants, envelope, len);
    Ok(one_eps * v_t + one_eps / epsilon * tail)
}

/// `max_{v ∈ box} vᵀ M v` for positive semidefinite `M`, attained at a
/// vertex.
pub fn box_quadratic_max<S: Scalar>(bx: &BoxSet<S>, m: &Mat<S>) -> Result<S> {
    if !bx.is_bounded() {
        return Err(Error::Unbounded("quadratic maximum over an unbounded box".into()));
    }
    if bx.dim() != m.rows() {
        return Err(Error::Dimension(format!("box of dim {} vs weight of size {}", bx.dim(), m.rows())));
    }
    if bx.dim() > MAX_VERTEX_DIM {
        return Err(Error::InvalidArgument(format!("vertex enumeration limited to dim ≤ {MAX_VERTEX_DIM}")));
    }
    Ok(bx.vertices().iter().map(|v| m.quad_form(v)).fold(S::zero(), |a, b| a.max(b)))
}

/// `(A, B) = (C_Q + C_R, C_G)` with the `C` the weighted squared-norm
/// maxima over `W` and `V`; `B = 0` when the terminal cost is off.
pub fn lemma4_constants<S: Scalar>(
    sets: &ConstraintSets<S>,
    weights: &CostWeights<S>,
    model: &SystemModel<S>,
) -> Result<(S, S)> {
    if sets.disturbances.dim() != model.q() || sets.noise.dim() != model.p() {
        return Err(Error::Dimension("sets do not match the model".into()));
    }
    let c_q = box_quadratic_max(&sets.disturbances, weights.q())?;
    let c_r = box_quadratic_max(&sets.noise, weights.r())?;
    let c_g = match weights.active_terminal() {
        Some(g) => box_quadratic_max(&sets.noise, g)?,
        None => S::zero(),
    };
    Ok((c_q + c_r, c_g))
}

/// `(J_T / T, V_T / T)`.
pub fn averaged_performance<S: Scalar>(
    candidate: &EstimateTrajectory<S>,
    reference: &SolveReport<S>,
    data: &DataBatch<S>,
    weights: &CostWeights<S>,
    model: &SystemModel<S>,
) -> Result<(S, S)> {
    let horizon = data.horizon();
    if horizon == 0 {
        return Err(Error::InvalidArgument("averaged performance needs T ≥ 1".into()));
    }
    let rep = perf_report(candidate, reference, data, weights, model, None)?;
    let t = S::lit(horizon as f64);
    Ok((rep.j_candidate / t, rep.v_t / t))
}

/// Right-hand side of the averaged estimate `V/T + ε A + (1+ε)/ε σ₁(N)`.
pub fn averaged_bound<S: Scalar>(avg_v: S, epsilon: S, a: S, sigma1: S) -> Result<S> {
    if !(epsilon > S::zero()) {
        return Err(Error::InvalidArgument("bound needs ε > 0".into()));
    }
    Ok(avg_v + epsilon * a + (S::one() + epsilon) / epsilon * sigma1)
}

/// One row of the estimator comparison; `None` marks a failed estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "N")]
    pub len: usize,
    #[serde(rename = "J_ae")]
    pub j_ae: Option<f64>,
    #[serde(rename = "J_mhe")]
    pub j_mhe: Option<f64>,
    #[serde(rename = "V_T")]
    pub v_t: f64,
    pub gap_ae: Option<f64>,
    pub gap_mhe: Option<f64>,
    pub sne_fie: Option<f64>,
    pub sne_ae: Option<f64>,
    pub sne_mhe: Option<f64>,
    pub bound: Option<f64>,
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(["N", "J_ae", "J_mhe", "V_T", "gap_ae", "gap_mhe", "sne_fie", "sne_ae", "sne_mhe", "bound"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
