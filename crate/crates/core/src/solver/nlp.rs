//! Evaluation of the estimation NLP over the stacked decision vector
//! `(x_0, w_0, x_1, w_1, …, x_N)`.

use crate::cost::EstimateTrajectory;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

use super::ProblemSpec;

/// Position of a variable or constraint row in the stage-interleaved KKT
/// ordering: `(stage, order)`.
pub(crate) type Slot = (usize, u8);

pub(crate) const SLOT_PIN_INITIAL: u8 = 0;
pub(crate) const SLOT_X: u8 = 1;
pub(crate) const SLOT_X_ROWS: u8 = 2;
pub(crate) const SLOT_W: u8 = 3;
pub(crate) const SLOT_W_ROWS: u8 = 4;
pub(crate) const SLOT_DYNAMICS: u8 = 5;
pub(crate) const SLOT_PIN_TERMINAL: u8 = 6;

/// Sparse equality row `value(z) = 0` with its gradient.
#[derive(Debug, Clone)]
pub(crate) struct EqRow<S> {
    pub slot: Slot,
    pub value: S,
    pub entries: Vec<(usize, S)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum IneqTarget {
    State { j: usize, i: usize },
    Disturbance { j: usize, i: usize },
    Noise { j: usize, i: usize },
}

/// One finite side of a box, written as `s(z) ≥ 0`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ineq<S> {
    pub target: IneqTarget,
    pub bound: S,
    pub upper: bool,
}

impl<S> Ineq<S> {
    pub fn slot(&self) -> Slot {
        match self.target {
            IneqTarget::State { j, .. } | IneqTarget::Noise { j, .. } => (j, SLOT_X_ROWS),
            IneqTarget::Disturbance { j, .. } => (j, SLOT_W_ROWS),
        }
    }
}

/// Everything the solver needs at one iterate.
#[derive(Debug, Clone)]
pub(crate) struct Point<S> {
    pub objective: S,
    pub grad: Vec<S>,
    /// Gauss-Newton Hessian as `(row, col, value)` triplets in primal indices.
    pub hess: Vec<(usize, usize, S)>,
    pub rows: Vec<EqRow<S>>,
    pub slacks: Vec<S>,
    pub ineq_grads: Vec<Vec<(usize, S)>>,
}

impl<S: Scalar> Point<S> {
    pub fn constraint_norm_inf(&self) -> S {
        self.rows.iter().fold(S::zero(), |m, r| m.max(r.value.abs()))
    }
}

pub(crate) struct Nlp<'a, S: Scalar> {
    pub spec: &'a ProblemSpec<S>,
    pub n: usize,
    pub q: usize,
    pub horizon: usize,
    pub ineqs: Vec<Ineq<S>>,
}

impl<'a, S: Scalar> Nlp<'a, S> {
    pub fn new(spec: &'a ProblemSpec<S>) -> Self {
        let n = spec.model.n();
        let q = spec.model.q();
        let horizon = spec.data.horizon();
        let mut ineqs = Vec::new();
        let sets = &spec.sets;
        let pinned = |j: usize| (j == 0 && spec.pin_initial.is_some()) || (j == horizon && spec.pin_terminal.is_some());
        let mut push_sides = |lower: &[S], upper: &[S], make: &dyn Fn(usize) -> IneqTarget| {
            for i in 0..lower.len() {
                if lower[i].is_finite() {
                    ineqs.push(Ineq { target: make(i), bound: lower[i], upper: false });
                }
                if upper[i].is_finite() {
                    ineqs.push(Ineq { target: make(i), bound: upper[i], upper: true });
                }
            }
        };
        for j in 0..=horizon {
            if !pinned(j) {
                push_sides(sets.states.lower(), sets.states.upper(), &|i| IneqTarget::State { j, i });
                push_sides(sets.noise.lower(), sets.noise.upper(), &|i| IneqTarget::Noise { j, i });
            }
            if j < horizon {
                push_sides(sets.disturbances.lower(), sets.disturbances.upper(), &|i| IneqTarget::Disturbance { j, i });
            }
        }
        Self { spec, n, q, horizon, ineqs }
    }

    #[inline]
    pub fn stride(&self) -> usize {
        self.n + self.q
    }

    pub fn nv(&self) -> usize {
        self.horizon * self.stride() + self.n
    }

    #[inline]
    pub fn xo(&self, j: usize) -> usize {
        j * self.stride()
    }

    #[inline]
    pub fn wo(&self, j: usize) -> usize {
        j * self.stride() + self.n
    }

    /// KKT slot of primal variable `v`.
    pub fn var_slot(&self, v: usize) -> Slot {
        let j = v / self.stride();
        if v % self.stride() < self.n {
            (j, SLOT_X)
        } else {
            (j, SLOT_W)
        }
    }

    pub fn pack(&self, traj: &EstimateTrajectory<S>) -> Vec<S> {
        let mut z = Vec::with_capacity(self.nv());
        for j in 0..=self.horizon {
            z.extend_from_slice(traj.x(j));
            if j < self.horizon {
                z.extend_from_slice(traj.w(j));
            }
        }
        z
    }

    pub fn unpack(&self, z: &[S]) -> EstimateTrajectory<S> {
        let states = (0..=self.horizon).map(|j| z[self.xo(j)..self.xo(j) + self.n].to_vec()).collect();
        let dist = (0..self.horizon).map(|j| z[self.wo(j)..self.wo(j) + self.q].to_vec()).collect();
        EstimateTrajectory::new(states, dist).expect("consistent layout")
    }

    fn x<'z>(&self, z: &'z [S], j: usize) -> &'z [S] {
        &z[self.xo(j)..self.xo(j) + self.n]
    }

    fn w<'z>(&self, z: &'z [S], j: usize) -> &'z [S] {
        &z[self.wo(j)..self.wo(j) + self.q]
    }

    /// Slack of inequality `k` plus its sparse gradient, given the output
    /// residual and output Jacobian at the relevant stage.
    fn slack(&self, ineq: &Ineq<S>, z: &[S], resid: &[Vec<S>], out_jac: &[Mat<S>]) -> (S, Vec<(usize, S)>) {
        let sign = if ineq.upper { -S::one() } else { S::one() };
        match ineq.target {
            IneqTarget::State { j, i } => {
                let v = z[self.xo(j) + i];
                (sign * (v - ineq.bound), vec![(self.xo(j) + i, sign)])
            }
            IneqTarget::Disturbance { j, i } => {
                let v = z[self.wo(j) + i];
                (sign * (v - ineq.bound), vec![(self.wo(j) + i, sign)])
            }
            IneqTarget::Noise { j, i } => {
                let r = resid[j][i];
                // ∂r/∂x = −H
                let grad = (0..self.n).map(|k| (self.xo(j) + k, -sign * out_jac[j][(i, k)])).collect();
                (sign * (r - ineq.bound), grad)
            }
        }
    }

    pub fn eval(&self, z: &[S]) -> Result<Point<S>> {
        let spec = self.spec;
        let model = &spec.model;
        let weights = &spec.weights;
        let data = &spec.data;
        let (n, q, big_n) = (self.n, self.q, self.horizon);
        let two = S::lit(2.0);
        let mut objective = S::zero();
        let mut grad = vec![S::zero(); self.nv()];
        let mut hess = Vec::new();
        let mut rows = Vec::with_capacity(big_n * n + 2 * n);
        let mut resid = Vec::with_capacity(big_n + 1);
        let mut out_jac = Vec::with_capacity(big_n + 1);

        if let Some(pin) = &spec.pin_initial {
            for i in 0..n {
                rows.push(EqRow {
                    slot: (0, SLOT_PIN_INITIAL),
                    value: z[self.xo(0) + i] - pin[i],
                    entries: vec![(self.xo(0) + i, S::one())],
                });
            }
        }
        for j in 0..=big_n {
            let x = self.x(z, j);
            let u = data.u(j);
            let hx = model.h(x, u)?;
            let r: Vec<S> = data.y(j).iter().zip(&hx).map(|(a, b)| *a - *b).collect();
            let hj = model.output_jacobian(x, u);
            let weight = if j < big_n { Some(weights.r()) } else { weights.active_terminal() };
            if let Some(wm) = weight {
                objective = objective + wm.quad_form(&r);
                let wr = wm.mul_vec(&r);
                let gx = hj.tr_mul_vec(&wr);
                for k in 0..n {
                    grad[self.xo(j) + k] = grad[self.xo(j) + k] - two * gx[k];
                }
                let hwh = hj.transpose().matmul(&wm.matmul(&hj));
                for a in 0..n {
                    for b in 0..n {
                        let v = two * hwh[(a, b)];
                        if v != S::zero() {
                            hess.push((self.xo(j) + a, self.xo(j) + b, v));
                        }
                    }
                }
            }
            if j < big_n {
                let w = self.w(z, j);
                objective = objective + weights.q().quad_form(w);
                let qw = weights.q().mul_vec(w);
                for k in 0..q {
                    grad[self.wo(j) + k] = two * qw[k];
                    for b in 0..q {
                        let v = two * weights.q()[(k, b)];
                        if v != S::zero() {
                            hess.push((self.wo(j) + k, self.wo(j) + b, v));
                        }
                    }
                }
                let next = model.f(x, u, w)?;
                let (fx, fw) = model.dynamics_jacobians(x, u, w);
                let xn = self.x(z, j + 1);
                for i in 0..n {
                    let mut entries = Vec::with_capacity(2 * n + q);
                    for k in 0..n {
                        entries.push((self.xo(j) + k, -fx[(i, k)]));
                    }
                    for k in 0..q {
                        entries.push((self.wo(j) + k, -fw[(i, k)]));
                    }
                    entries.push((self.xo(j + 1) + i, S::one()));
                    rows.push(EqRow { slot: (j, SLOT_DYNAMICS), value: xn[i] - next[i], entries });
                }
            }
            resid.push(r);
            out_jac.push(hj);
        }
        if let Some(pin) = &spec.pin_terminal {
            for i in 0..n {
                rows.push(EqRow {
                    slot: (big_n, SLOT_PIN_TERMINAL),
                    value: z[self.xo(big_n) + i] - pin[i],
                    entries: vec![(self.xo(big_n) + i, S::one())],
                });
            }
        }
        let mut slacks = Vec::with_capacity(self.ineqs.len());
        let mut ineq_grads = Vec::with_capacity(self.ineqs.len());
        for ineq in &self.ineqs {
            let (s, g) = self.slack(ineq, z, &resid, &out_jac);
            slacks.push(s);
            ineq_grads.push(g);
        }
        if !objective.is_finite()
            || grad.iter().any(|v| !v.is_finite())
            || rows.iter().any(|r| !r.value.is_finite())
            || slacks.iter().any(|s| !s.is_finite())
        {
            return Err(Error::NonFinite("NLP evaluation".into()));
        }
        Ok(Point { objective, grad, hess, rows, slacks, ineq_grads })
    }

    /// Second-order Lagrangian terms missing from the Gauss-Newton Hessian,
    /// for `L = F + λᵀc − νᵀs` with `lambda` ordered like [`Point::rows`]
    /// and `nu` like the inequalities.
    pub fn curvature(&self, z: &[S], lambda: &[S], nu: &[S]) -> Result<Vec<(usize, usize, S)>> {
        let spec = self.spec;
        let model = &spec.model;
        let data = &spec.data;
        let (n, q, big_n) = (self.n, self.q, self.horizon);
        let two = S::lit(2.0);
        let first_dyn = if spec.pin_initial.is_some() { n } else { 0 };
        // weights on ∇²h_i, per stage
        let mut out_mu: Vec<Vec<S>> = vec![vec![S::zero(); model.p()]; big_n + 1];
        for (k, ineq) in self.ineqs.iter().enumerate() {
            if let IneqTarget::Noise { j, i } = ineq.target {
                let sign = if ineq.upper { -S::one() } else { S::one() };
                out_mu[j][i] = out_mu[j][i] + nu[k] * sign;
            }
        }
        let mut trip = Vec::new();
        for j in 0..=big_n {
            let x = self.x(z, j);
            let u = data.u(j);
            let weight = if j < big_n { Some(spec.weights.r()) } else { spec.weights.active_terminal() };
            if let Some(wm) = weight {
                let hx = model.h(x, u)?;
                let r: Vec<S> = data.y(j).iter().zip(&hx).map(|(a, b)| *a - *b).collect();
                for (m, wr) in out_mu[j].iter_mut().zip(wm.mul_vec(&r)) {
                    *m = *m - two * wr;
                }
            }
            if out_mu[j].iter().any(|m| *m != S::zero()) {
                let c = model.output_curvature(x, u, &out_mu[j]);
                for a in 0..n {
                    for b in 0..n {
                        if c[(a, b)] != S::zero() {
                            trip.push((self.xo(j) + a, self.xo(j) + b, c[(a, b)]));
                        }
                    }
                }
            }
            if j < big_n {
                let lam: Vec<S> = lambda[first_dyn + j * n..first_dyn + (j + 1) * n].iter().map(|l| -*l).collect();
                if lam.iter().any(|l| *l != S::zero()) {
                    let c = model.dynamics_curvature(x, u, self.w(z, j), &lam);
                    let idx = |a: usize| if a < n { self.xo(j) + a } else { self.wo(j) + a - n };
                    for a in 0..n + q {
                        for b in 0..n + q {
                            if c[(a, b)] != S::zero() {
                                trip.push((idx(a), idx(b), c[(a, b)]));
                            }
                        }
                    }
                }
            }
        }
        Ok(trip)
    }
}
