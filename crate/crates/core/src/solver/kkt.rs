//! Banded assembly of the Newton/KKT systems and the first-order optimality
//! residual.

use crate::cost::EstimateTrajectory;
use crate::error::{Error, Result};
use crate::linalg::{BandedLu, BandedMatrix};
use crate::scalar::Scalar;

use super::nlp::{Nlp, Slot};
use super::ProblemSpec;

/// Slack below which an inequality counts as active in [`kkt_residual`].
pub const ACTIVE_SLACK: f64 = 1e-6;

/// A constraint row as seen by the assembler.
pub(crate) struct RowRef<'a, S> {
    pub slot: Slot,
    pub entries: &'a [(usize, S)],
}

/// Factorized `[H + δ_p I, Jᵀ; J, −δ_d I]` in stage-interleaved order.
pub(crate) struct KktSolver<S> {
    pos: Vec<usize>,
    nv: usize,
    lu: BandedLu<S>,
}

impl<S: Scalar> KktSolver<S> {
    pub fn factor(
        nlp: &Nlp<'_, S>,
        hess: &[(usize, usize, S)],
        rows: &[RowRef<'_, S>],
        primal_reg: S,
        dual_reg: S,
    ) -> Result<Self> {
        let nv = nlp.nv();
        let total = nv + rows.len();
        let mut keys: Vec<(Slot, usize)> = (0..nv)
            .map(|v| (nlp.var_slot(v), v))
            .chain(rows.iter().enumerate().map(|(r, row)| (row.slot, nv + r)))
            .collect();
        keys.sort_unstable();
        let mut pos = vec![0usize; total];
        for (p, (_, u)) in keys.iter().enumerate() {
            pos[*u] = p;
        }
        let mut trip = Vec::with_capacity(hess.len() + nv + rows.len() * 8);
        for &(i, j, v) in hess {
            trip.push((pos[i], pos[j], v));
        }
        for v in 0..nv {
            trip.push((pos[v], pos[v], primal_reg));
        }
        for (r, row) in rows.iter().enumerate() {
            let pr = pos[nv + r];
            for &(c, v) in row.entries {
                trip.push((pr, pos[c], v));
                trip.push((pos[c], pr, v));
            }
            trip.push((pr, pr, -dual_reg));
        }
        let lu = BandedMatrix::from_triplets(total, &trip).factor()?;
        Ok(Self { pos, nv, lu })
    }

    /// Returns `(primal part, dual part)` of the solution.
    pub fn solve(&self, rhs_primal: &[S], rhs_dual: &[S]) -> (Vec<S>, Vec<S>) {
        let mut b = vec![S::zero(); self.pos.len()];
        for (u, v) in rhs_primal.iter().chain(rhs_dual).enumerate() {
            b[self.pos[u]] = *v;
        }
        let x = self.lu.solve(&b);
        let primal = (0..self.nv).map(|u| x[self.pos[u]]).collect();
        let dual = (self.nv..self.pos.len()).map(|u| x[self.pos[u]]).collect();
        (primal, dual)
    }
}

/// `Mᵀ m` for sparse rows `M`.
pub(crate) fn rows_tr_mul<S: Scalar>(rows: &[RowRef<'_, S>], m: &[S], nv: usize) -> Vec<S> {
    let mut out = vec![S::zero(); nv];
    for (row, mult) in rows.iter().zip(m) {
        for &(c, v) in row.entries {
            out[c] = out[c] + v * *mult;
        }
    }
    out
}

/// First-order optimality measure of `traj` for `spec`.
///
/// Multipliers are the least-squares fit of the stationarity condition over
/// the equality rows and the inequalities with slack at most
/// [`ACTIVE_SLACK`]. The result adds the sup norm of the remaining
/// stationarity residual, the sup norm of the equality residuals, the worst
/// bound violation, negative inequality multipliers and `Σ |ν_k s_k|`.
pub fn kkt_residual<S: Scalar>(spec: &ProblemSpec<S>, traj: &EstimateTrajectory<S>) -> Result<S> {
    spec.validate()?;
    let n = spec.model.n();
    let q = spec.model.q();
    if traj.horizon() != spec.data.horizon()
        || traj.states().iter().any(|x| x.len() != n)
        || traj.disturbances().iter().any(|w| w.len() != q)
    {
        return Err(Error::Dimension("trajectory does not match the problem".into()));
    }
    let nlp = Nlp::new(spec);
    let z = nlp.pack(traj);
    let pt = nlp.eval(&z)?;
    let active: Vec<usize> = (0..pt.slacks.len()).filter(|&k| pt.slacks[k] <= S::lit(ACTIVE_SLACK)).collect();
    let neg_grads: Vec<Vec<(usize, S)>> =
        active.iter().map(|&k| pt.ineq_grads[k].iter().map(|&(c, v)| (c, -v)).collect()).collect();
    let mut rows: Vec<RowRef<'_, S>> = pt.rows.iter().map(|r| RowRef { slot: r.slot, entries: &r.entries }).collect();
    for (idx, &k) in active.iter().enumerate() {
        rows.push(RowRef { slot: nlp.ineqs[k].slot(), entries: &neg_grads[idx] });
    }
    let ident: Vec<(usize, usize, S)> = Vec::new();
    let zeros = vec![S::zero(); rows.len()];
    let scale = pt.grad.iter().fold(S::one(), |m, v| m.max(v.abs()));
    let mut solved = None;
    for eps in [0.0, 1e-14, 1e-12, 1e-10, 1e-8] {
        if let Ok(k) = KktSolver::factor(&nlp, &ident, &rows, S::one(), S::lit(eps) * scale) {
            solved = Some(k.solve(&pt.grad, &zeros));
            break;
        }
    }
    let (r, m) = solved.ok_or_else(|| Error::Singular("multiplier estimate".into()))?;
    // r = g − Mᵀm, so the multipliers of g + Mᵀμ are μ = −m.
    let stationarity = r.iter().fold(S::zero(), |a, v| a.max(v.abs()));
    let feas = pt.constraint_norm_inf() + pt.slacks.iter().fold(S::zero(), |a, s| a.max(-*s));
    let mut sign = S::zero();
    let mut comp = S::zero();
    for (idx, &k) in active.iter().enumerate() {
        let nu = -m[pt.rows.len() + idx];
        sign = sign + (-nu).max(S::zero());
        comp = comp + (nu * pt.slacks[k]).abs();
    }
    Ok(stationarity + feas + sign + comp)
}
