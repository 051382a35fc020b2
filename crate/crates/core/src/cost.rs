//! Quadratic estimation objective and its derivatives.
//!
//! The stage cost is `|w|²_Q + |y − h(x,u)|²_R`; the terminal cost is
//! `|y − h(x,u)|²_G` in filtering form and identically zero in prediction
//! form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, symmetric_eigenvalues, Mat};
use crate::scalar::Scalar;
use crate::system_model::{DataBatch, SystemModel};

/// Whether the terminal fitting error is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    /// `g(x; d) = |y − h(x,u)|²_G`
    Filtering,
    /// `g ≡ 0`
    Prediction,
}

#[derive(Debug, Clone, PartialEq)]
struct Weight<S> {
    matrix: Mat<S>,
    chol: Mat<S>,
    lambda_max: S,
}

impl<S: Scalar> Weight<S> {
    fn new(label: &str, matrix: Mat<S>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Dimension(format!("{label} must be square")));
        }
        if !matrix.all_finite() {
            return Err(Error::NonFinite(format!("{label} weight")));
        }
        let scale = matrix.row_major().iter().fold(S::one(), |m, v| m.max(v.abs()));
        if matrix.max_abs_asymmetry() > S::lit(1e-12) * scale {
            return Err(Error::InvalidArgument(format!("{label} must be symmetric")));
        }
        let chol = cholesky(&matrix).ok_or_else(|| Error::NotPositiveDefinite(label.to_string()))?;
        let lambda_max = symmetric_eigenvalues(&matrix).last().copied().unwrap_or(S::zero());
        Ok(Self { matrix, chol, lambda_max })
    }

    /// `|r|²_M` through the Cholesky factor: `|Lᵀ r|²`.
    fn sq_norm(&self, r: &[S]) -> S {
        self.chol.tr_mul_vec(r).iter().map(|v| *v * *v).sum()
    }
}

/// Positive-definite weights `Q` (disturbance), `R` (fitting error) and `G`
/// (terminal fitting error).
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights<S> {
    q: Weight<S>,
    r: Weight<S>,
    g: Weight<S>,
    terminal: TerminalMode,
}

impl<S: Scalar> CostWeights<S> {
    pub fn new(q: Mat<S>, r: Mat<S>, g: Mat<S>, terminal: TerminalMode) -> Result<Self> {
        let q = Weight::new("Q", q)?;
        let r = Weight::new("R", r)?;
        let g = Weight::new("G", g)?;
        if r.matrix.rows() != g.matrix.rows() {
            return Err(Error::Dimension("R and G must have the same size".into()));
        }
        Ok(Self { q, r, g, terminal })
    }

    /// `Q = I_q`, `R = G = I_p`.
    pub fn identity(q: usize, p: usize, terminal: TerminalMode) -> Self {
        Self::new(Mat::identity(q), Mat::identity(p), Mat::identity(p), terminal).expect("identity weights")
    }

    pub fn q(&self) -> &Mat<S> {
        &self.q.matrix
    }

    pub fn r(&self) -> &Mat<S> {
        &self.r.matrix
    }

    pub fn g(&self) -> &Mat<S> {
        &self.g.matrix
    }

    pub fn terminal_mode(&self) -> TerminalMode {
        self.terminal
    }

    pub fn lambda_max_q(&self) -> S {
        self.q.lambda_max
    }

    pub fn lambda_max_r(&self) -> S {
        self.r.lambda_max
    }

    pub fn lambda_max_g(&self) -> S {
        self.g.lambda_max
    }

    pub fn disturbance_dim(&self) -> usize {
        self.q.matrix.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.r.matrix.rows()
    }

    /// Same weights multiplied by a positive factor.
    pub fn scaled(&self, factor: S) -> Result<Self> {
        Self::new(self.q().scale(factor), self.r().scale(factor), self.g().scale(factor), self.terminal)
    }

    pub fn sq_norm_q(&self, w: &[S]) -> S {
        self.q.sq_norm(w)
    }

    pub fn sq_norm_r(&self, r: &[S]) -> S {
        self.r.sq_norm(r)
    }

    pub fn sq_norm_g(&self, r: &[S]) -> S {
        self.g.sq_norm(r)
    }

    /// Terminal weight actually in effect, `None` in prediction form.
    pub fn active_terminal(&self) -> Option<&Mat<S>> {
        match self.terminal {
            TerminalMode::Filtering => Some(&self.g.matrix),
            TerminalMode::Prediction => None,
        }
    }

    fn check_model(&self, model: &SystemModel<S>) -> Result<()> {
        if self.disturbance_dim() != model.q() || self.output_dim() != model.p() {
            return Err(Error::Dimension(format!(
                "weights sized (q={}, p={}) for model (q={}, p={})",
                self.disturbance_dim(),
                self.output_dim(),
                model.q(),
                model.p()
            )));
        }
        Ok(())
    }

    pub fn to_doc(&self) -> WeightsDoc {
        WeightsDoc {
            q: self.q().row_major().iter().map(|v| v.as_f64()).collect(),
            r: self.r().row_major().iter().map(|v| v.as_f64()).collect(),
            g: self.g().row_major().iter().map(|v| v.as_f64()).collect(),
            terminal_mode: self.terminal,
        }
    }

    pub fn from_doc(doc: &WeightsDoc) -> Result<Self> {
        let square = |label: &str, v: &[f64]| -> Result<Mat<S>> {
            let n = (v.len() as f64).sqrt().round() as usize;
            if n * n != v.len() || n == 0 {
                return Err(Error::Config(format!("{label} has {} entries, not a square matrix", v.len())));
            }
            Ok(Mat::from_row_major(n, n, v.iter().map(|x| S::lit(*x)).collect()))
        };
        Self::new(square("Q", &doc.q)?, square("R", &doc.r)?, square("G", &doc.g)?, doc.terminal_mode)
    }
}

/// JSON form of [`CostWeights`]: dense row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsDoc {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub terminal_mode: TerminalMode,
}

/// State sequence `x_0..x_T` with disturbances `w_0..w_{T−1}`; the combined
/// point at `T` is `(x_T, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTrajectory<S> {
    states: Vec<Vec<S>>,
    disturbances: Vec<Vec<S>>,
}

impl<S: Scalar> EstimateTrajectory<S> {
    pub fn new(states: Vec<Vec<S>>, disturbances: Vec<Vec<S>>) -> Result<Self> {
        if states.is_empty() || disturbances.len() + 1 != states.len() {
            return Err(Error::Length(format!(
                "{} states need {} disturbances, got {}",
                states.len(),
                states.len().saturating_sub(1),
                disturbances.len()
            )));
        }
        let n = states[0].len();
        if states.iter().any(|x| x.len() != n) {
            return Err(Error::Dimension("ragged state sequence".into()));
        }
        if let Some(q) = disturbances.first().map(Vec::len) {
            if disturbances.iter().any(|w| w.len() != q) {
                return Err(Error::Dimension("ragged disturbance sequence".into()));
            }
        }
        Ok(Self { states, disturbances })
    }

    pub fn horizon(&self) -> usize {
        self.disturbances.len()
    }

    pub fn states(&self) -> &[Vec<S>] {
        &self.states
    }

    pub fn disturbances(&self) -> &[Vec<S>] {
        &self.disturbances
    }

    pub fn x(&self, j: usize) -> &[S] {
        &self.states[j]
    }

    pub fn w(&self, j: usize) -> &[S] {
        &self.disturbances[j]
    }

    pub fn into_parts(self) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
        (self.states, self.disturbances)
    }

    /// Stacked `z_j = (x_j, w_j)`, with `w_T = 0`. `q` is needed at `T` when
    /// the horizon is zero.
    pub fn z(&self, j: usize, q: usize) -> Vec<S> {
        let mut z = self.states[j].clone();
        if j < self.horizon() {
            z.extend_from_slice(&self.disturbances[j]);
        } else {
            z.extend(std::iter::repeat_n(S::zero(), q));
        }
        z
    }

    /// Largest `|x_{j+1} − f(x_j, u_j, w_j)|_∞`.
    pub fn dynamics_defect(&self, model: &SystemModel<S>, data: &DataBatch<S>) -> Result<S> {
        check_lengths(self, data)?;
        let mut worst = S::zero();
        for j in 0..self.horizon() {
            let next = model.f(&self.states[j], data.u(j), &self.disturbances[j])?;
            for (a, b) in next.iter().zip(&self.states[j + 1]) {
                worst = worst.max((*a - *b).abs());
            }
        }
        Ok(worst)
    }

    pub fn is_dynamically_feasible(&self, model: &SystemModel<S>, data: &DataBatch<S>, tol: S) -> Result<bool> {
        Ok(self.dynamics_defect(model, data)? <= tol)
    }

    /// Forward rollout from `x0` with the given disturbances.
    pub fn rollout(model: &SystemModel<S>, data: &DataBatch<S>, x0: Vec<S>, disturbances: Vec<Vec<S>>) -> Result<Self> {
        if disturbances.len() != data.horizon() {
            return Err(Error::Length("rollout disturbances must cover the data horizon".into()));
        }
        let mut states = Vec::with_capacity(data.len());
        states.push(x0);
        for (j, w) in disturbances.iter().enumerate() {
            let next = model.f(&states[j], data.u(j), w)?;
            states.push(next);
        }
        Self::new(states, disturbances)
    }
}

fn check_lengths<S: Scalar>(traj: &EstimateTrajectory<S>, data: &DataBatch<S>) -> Result<()> {
    if traj.horizon() != data.horizon() {
        return Err(Error::Length(format!("trajectory horizon {} vs data horizon {}", traj.horizon(), data.horizon())));
    }
    Ok(())
}

fn residual<S: Scalar>(model: &SystemModel<S>, x: &[S], u: &[S], y: &[S]) -> Result<Vec<S>> {
    let hx = model.h(x, u)?;
    if y.len() != hx.len() {
        return Err(Error::Dimension(format!("measurement of dim {} vs output dim {}", y.len(), hx.len())));
    }
    Ok(y.iter().zip(&hx).map(|(a, b)| *a - *b).collect())
}

/// Extension point for stage and terminal costs other than the built-in
/// quadratic one.
pub trait EstimationCost<S: Scalar> {
    fn stage(&self, model: &SystemModel<S>, x: &[S], w: &[S], u: &[S], y: &[S]) -> Result<S>;
    fn terminal(&self, model: &SystemModel<S>, x: &[S], u: &[S], y: &[S]) -> Result<S>;
}

impl<S: Scalar> EstimationCost<S> for CostWeights<S> {
    fn stage(&self, model: &SystemModel<S>, x: &[S], w: &[S], u: &[S], y: &[S]) -> Result<S> {
        self.check_model(model)?;
        if w.len() != self.disturbance_dim() {
            return Err(Error::Dimension(format!("w of dim {} for Q of size {}", w.len(), self.disturbance_dim())));
        }
        let r = residual(model, x, u, y)?;
        Ok(self.sq_norm_q(w) + self.sq_norm_r(&r))
    }

    fn terminal(&self, model: &SystemModel<S>, x: &[S], u: &[S], y: &[S]) -> Result<S> {
        self.check_model(model)?;
        let r = residual(model, x, u, y)?;
        Ok(match self.terminal {
            TerminalMode::Filtering => self.sq_norm_g(&r),
            TerminalMode::Prediction => S::zero(),
        })
    }
}

/// `l(x, w; d) = |w|²_Q + |y − h(x,u)|²_R`
pub fn stage_cost<S: Scalar>(
    weights: &CostWeights<S>,
    x: &[S],
    w: &[S],
    d: (&[S], &[S]),
    model: &SystemModel<S>,
) -> Result<S> {
    weights.stage(model, x, w, d.0, d.1)
}

/// `g(x; d)`: `|y − h(x,u)|²_G` in filtering form, `0` in prediction form.
pub fn terminal_cost<S: Scalar>(
    weights: &CostWeights<S>,
    x: &[S],
    d: (&[S], &[S]),
    model: &SystemModel<S>,
) -> Result<S> {
    weights.terminal(model, x, d.0, d.1)
}

/// Total cost with an arbitrary [`EstimationCost`].
pub fn total_cost_with<S: Scalar>(
    cost: &dyn EstimationCost<S>,
    traj: &EstimateTrajectory<S>,
    data: &DataBatch<S>,
    model: &SystemModel<S>,
) -> Result<S> {
    check_lengths(traj, data)?;
    let t = traj.horizon();
    let mut acc = S::zero();
    for j in 0..t {
        acc = acc + cost.stage(model, traj.x(j), traj.w(j), data.u(j), data.y(j))?;
    }
    Ok(acc + cost.terminal(model, traj.x(t), data.u(t), data.y(t))?)
}

/// `J_T = Σ_{j<T} l(x_j, w_j; d_j) + g(x_T; d_T)`
pub fn total_cost<S: Scalar>(
    weights: &CostWeights<S>,
    traj: &EstimateTrajectory<S>,
    data: &DataBatch<S>,
    model: &SystemModel<S>,
) -> Result<S> {
    total_cost_with(weights, traj, data, model)
}

/// Gradient of the total cost with respect to every `x_j` and `w_j`,
/// treating them as independent variables.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGradient<S> {
    pub dx: Vec<Vec<S>>,
    pub dw: Vec<Vec<S>>,
}

impl<S: Scalar> TrajectoryGradient<S> {
    /// Flattened in stage order `x_0, w_0, x_1, w_1, …, x_T`.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for j in 0..self.dx.len() {
            out.extend_from_slice(&self.dx[j]);
            if j < self.dw.len() {
                out.extend_from_slice(&self.dw[j]);
            }
        }
        out
    }
}

pub fn cost_gradient<S: Scalar>(
    weights: &CostWeights<S>,
    traj: &EstimateTrajectory<S>,
    data: &DataBatch<S>,
    model: &SystemModel<S>,
) -> Result<TrajectoryGradient<S>> {
    check_lengths(traj, data)?;
    weights.check_model(model)?;
    let two = S::lit(2.0);
    let t = traj.horizon();
    let mut dx = Vec::with_capacity(t + 1);
    let mut dw = Vec::with_capacity(t);
    for j in 0..=t {
        let x = traj.x(j);
        let u = data.u(j);
        let r = residual(model, x, u, data.y(j))?;
        let hx = model.output_jacobian(x, u);
        let weight = if j < t { Some(weights.r()) } else { weights.active_terminal() };
        let gx = match weight {
            Some(wm) => hx.tr_mul_vec(&wm.mul_vec(&r)).into_iter().map(|v| -two * v).collect(),
            None => vec![S::zero(); x.len()],
        };
        dx.push(gx);
        if j < t {
            dw.push(weights.q().mul_vec(traj.w(j)).into_iter().map(|v| two * v).collect());
        }
    }
    let grad = TrajectoryGradient { dx, dw };
    if grad.flatten().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost gradient".into()));
    }
    Ok(grad)
}

/// Gradient of `(x_0, w_{0:T−1}) ↦ J_T` where the states are generated by
/// forward simulation from `x_0` (adjoint recursion). Returns `(∂/∂x_0,
/// ∂/∂w_j)`.
pub fn reduced_gradient<S: Scalar>(
    weights: &CostWeights<S>,
    x0: &[S],
    disturbances: &[Vec<S>],
    data: &DataBatch<S>,
    model: &SystemModel<S>,
) -> Result<(Vec<S>, Vec<Vec<S>>)> {
    let traj = EstimateTrajectory::rollout(model, data, x0.to_vec(), disturbances.to_vec())?;
    let g = cost_gradient(weights, &traj, data, model)?;
    let t = traj.horizon();
    let mut adj = g.dx[t].clone();
    let mut dw = vec![Vec::new(); t];
    for j in (0..t).rev() {
        let (fx, fw) = model.dynamics_jacobians(traj.x(j), data.u(j), traj.w(j));
        let gw = fw.tr_mul_vec(&adj);
        dw[j] = g.dw[j].iter().zip(&gw).map(|(a, b)| *a + *b).collect();
        let gx = fx.tr_mul_vec(&adj);
        adj = g.dx[j].iter().zip(&gx).map(|(a, b)| *a + *b).collect();
    }
    Ok((adj, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system_model::ModelSpec;

    fn integrator() -> SystemModel<f64> {
        ModelSpec::ScalarIntegrator.build().unwrap()
    }

    #[test]
    fn zero_stage_cost_at_perfect_fit() {
        let w = CostWeights::identity(1, 1, TerminalMode::Filtering);
        assert_eq!(stage_cost(&w, &[2.5], &[0.0], (&[], &[2.5]), &integrator()).unwrap(), 0.0);
    }

    #[test]
    fn stage_cost_sums_weighted_squares() {
        let w = CostWeights::identity(1, 1, TerminalMode::Filtering);
        // residual 3, disturbance 2
        assert_eq!(stage_cost(&w, &[1.0], &[2.0], (&[], &[4.0]), &integrator()).unwrap(), 13.0);
        // scalar integrator instance: x = 1, w = 1, y = 2
        assert_eq!(stage_cost(&w, &[1.0], &[1.0], (&[], &[2.0]), &integrator()).unwrap(), 2.0);
    }

    #[test]
    fn terminal_modes() {
        let m = integrator();
        let pred = CostWeights::identity(1, 1, TerminalMode::Prediction);
        assert_eq!(terminal_cost(&pred, &[0.0], (&[], &[7.0]), &m).unwrap(), 0.0);
        let filt = CostWeights::identity(1, 1, TerminalMode::Filtering);
        assert_eq!(terminal_cost(&filt, &[1.0], (&[], &[3.0]), &m).unwrap(), 4.0);
        assert_eq!(terminal_cost(&filt, &[3.0], (&[], &[3.0]), &m).unwrap(), 0.0);
    }

    #[test]
    fn total_cost_one_step() {
        let m = integrator();
        let w = CostWeights::identity(1, 1, TerminalMode::Filtering);
        let data = DataBatch::new(0, 1, vec![vec![], vec![]], vec![vec![4.0], vec![5.0]]).unwrap();
        let traj = EstimateTrajectory::new(vec![vec![1.0], vec![3.0]], vec![vec![2.0]]).unwrap();
        // stage 4 + 9, terminal (5 - 3)^2
        assert_eq!(total_cost(&w, &traj, &data, &m).unwrap(), 17.0);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let m = integrator();
        let w = CostWeights::identity(1, 1, TerminalMode::Filtering);
        let data = DataBatch::new(0, 1, vec![vec![]; 3], vec![vec![0.0]; 3]).unwrap();
        let traj = EstimateTrajectory::new(vec![vec![1.0], vec![3.0]], vec![vec![2.0]]).unwrap();
        assert!(matches!(total_cost(&w, &traj, &data, &m), Err(Error::Length(_))));
    }

    #[test]
    fn gradient_of_disturbance_term() {
        let m = integrator();
        let w = CostWeights::identity(1, 1, TerminalMode::Filtering);
        let data = DataBatch::new(0, 1, vec![vec![], vec![]], vec![vec![0.0], vec![2.0]]).unwrap();
        let traj = EstimateTrajectory::new(vec![vec![0.0], vec![2.0]], vec![vec![2.0]]).unwrap();
        let g = cost_gradient(&w, &traj, &data, &m).unwrap();
        assert_eq!(g.dw[0][0], 4.0);
    }

    #[test]
    fn non_pd_weights_rejected() {
        let bad = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let r = CostWeights::new(bad, Mat::identity(1), Mat::identity(1), TerminalMode::Filtering);
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
        let asym = Mat::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]);
        assert!(CostWeights::new(asym, Mat::identity(1), Mat::identity(1), TerminalMode::Filtering).is_err());
    }

    #[test]
    fn weighted_norm_through_factor_matches_quadratic_form() {
        let q = Mat::<f64>::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.7]]);
        let w = CostWeights::new(q.clone(), Mat::identity(1), Mat::identity(1), TerminalMode::Filtering).unwrap();
        for v in [[1.0, -2.0], [0.3, 0.4], [-5.0, 1e-3]] {
            let a = w.sq_norm_q(&v);
            let b = q.quad_form(&v);
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn weights_doc_round_trip() {
        let w = CostWeights::<f64>::identity(2, 1, TerminalMode::Prediction);
        let doc = w.to_doc();
        let json = serde_json::to_string(&doc).unwrap();
        assert!(json.contains("\"prediction\""));
        assert_eq!(CostWeights::<f64>::from_doc(&serde_json::from_str(&json).unwrap()).unwrap(), w);
    }
}
