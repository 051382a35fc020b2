use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{dist, norm2, spectral_norm, Mat};
use crate::scalar::Scalar;

use super::sets::BoxSet;

/// State, input, disturbance and output dimensions `(n, m, q, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub p: usize,
}

/// Discrete-time system `x⁺ = f(x, u, w)`, `y = h(x, u) + v`, with analytic
/// first derivatives.
pub trait ModelFunctions<S: Scalar>: Send + Sync + Debug {
    fn dims(&self) -> Dims;

    fn dynamics(&self, x: &[S], u: &[S], w: &[S]) -> Vec<S>;

    /// `(∂f/∂x, ∂f/∂w)`, of shapes `n×n` and `n×q`.
    fn dynamics_jacobians(&self, x: &[S], u: &[S], w: &[S]) -> (Mat<S>, Mat<S>);

    fn output(&self, x: &[S], u: &[S]) -> Vec<S>;

    /// `∂h/∂x`, `p×n`.
    fn output_jacobian(&self, x: &[S], u: &[S]) -> Mat<S>;

    /// The drift `f_a(x, u)` when `f(x, u, w) = f_a(x, u) + w`, else `None`.
    fn drift(&self, _x: &[S], _u: &[S]) -> Option<Vec<S>> {
        None
    }

    fn is_additive(&self) -> bool;

    /// `Σ_i λ_i ∇²f_i` with respect to the stacked `(x, w)`, of shape
    /// `(n+q)×(n+q)`. The default differentiates the Jacobians centrally.
    fn dynamics_curvature(&self, x: &[S], u: &[S], w: &[S], lambda: &[S]) -> Mat<S> {
        let (n, q) = (x.len(), w.len());
        let mut out = Mat::zeros(n + q, n + q);
        let mut xp = x.to_vec();
        let mut wp = w.to_vec();
        for k in 0..n + q {
            let base = if k < n { x[k] } else { w[k - n] };
            let h = fd_step(base);
            let jac_at = |v: S, xp: &mut Vec<S>, wp: &mut Vec<S>| {
                if k < n {
                    xp[k] = v;
                } else {
                    wp[k - n] = v;
                }
                let j = self.dynamics_jacobians(xp, u, wp);
                if k < n {
                    xp[k] = base;
                } else {
                    wp[k - n] = base;
                }
                j
            };
            let (fxp, fwp) = jac_at(base + h, &mut xp, &mut wp);
            let (fxm, fwm) = jac_at(base - h, &mut xp, &mut wp);
            for a in 0..n + q {
                let mut acc = S::zero();
                for (i, l) in lambda.iter().enumerate() {
                    let d = if a < n { fxp[(i, a)] - fxm[(i, a)] } else { fwp[(i, a - n)] - fwm[(i, a - n)] };
                    acc = acc + *l * d;
                }
                out[(a, k)] = acc / (S::lit(2.0) * h);
            }
        }
        symmetrize(out)
    }

    /// `Σ_i μ_i ∇²h_i` with respect to `x`, `n×n`. Central differences of
    /// the output Jacobian by default.
    fn output_curvature(&self, x: &[S], u: &[S], mu: &[S]) -> Mat<S> {
        let n = x.len();
        let mut out = Mat::zeros(n, n);
        let mut xp = x.to_vec();
        for k in 0..n {
            let h = fd_step(x[k]);
            xp[k] = x[k] + h;
            let hp = self.output_jacobian(&xp, u);
            xp[k] = x[k] - h;
            let hm = self.output_jacobian(&xp, u);
            xp[k] = x[k];
            for a in 0..n {
                let acc: S = mu.iter().enumerate().map(|(i, m)| *m * (hp[(i, a)] - hm[(i, a)])).sum();
                out[(a, k)] = acc / (S::lit(2.0) * h);
            }
        }
        symmetrize(out)
    }
}

fn fd_step<S: Scalar>(v: S) -> S {
    S::epsilon().cbrt() * v.abs().max(S::one())
}

fn symmetrize<S: Scalar>(mut m: Mat<S>) -> Mat<S> {
    let half = S::lit(0.5);
    for a in 0..m.rows() {
        for b in a + 1..m.cols() {
            let v = half * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

/// A system together with its declared Lipschitz constants.
#[derive(Debug, Clone)]
pub struct SystemModel<S: Scalar> {
    name: String,
    functions: Arc<dyn ModelFunctions<S>>,
    lipschitz_f: S,
    lipschitz_h: S,
    prior: Vec<S>,
}

impl<S: Scalar> SystemModel<S> {
    pub fn new(
        name: impl Into<String>,
        functions: Arc<dyn ModelFunctions<S>>,
        lipschitz_f: S,
        lipschitz_h: S,
        prior: Vec<S>,
    ) -> Result<Self> {
        let dims = functions.dims();
        if functions.is_additive() && dims.q != dims.n {
            return Err(Error::Dimension(format!("additive model needs q = n, got q = {}, n = {}", dims.q, dims.n)));
        }
        if !(lipschitz_f > S::zero()) || !(lipschitz_h > S::zero()) {
            return Err(Error::InvalidArgument("Lipschitz constants must be positive".into()));
        }
        if prior.len() != dims.n {
            return Err(Error::Dimension(format!("prior of dim {} for n = {}", prior.len(), dims.n)));
        }
        Ok(Self { name: name.into(), functions, lipschitz_f, lipschitz_h, prior })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dims {
        self.functions.dims()
    }

    pub fn n(&self) -> usize {
        self.dims().n
    }

    pub fn m(&self) -> usize {
        self.dims().m
    }

    pub fn q(&self) -> usize {
        self.dims().q
    }

    pub fn p(&self) -> usize {
        self.dims().p
    }

    pub fn is_additive(&self) -> bool {
        self.functions.is_additive()
    }

    pub fn lipschitz_f(&self) -> S {
        self.lipschitz_f
    }

    pub fn lipschitz_h(&self) -> S {
        self.lipschitz_h
    }

    /// State used to seed initial guesses when outputs do not determine `x`.
    pub fn prior(&self) -> &[S] {
        &self.prior
    }

    pub fn functions(&self) -> &Arc<dyn ModelFunctions<S>> {
        &self.functions
    }

    fn check_xu(&self, x: &[S], u: &[S]) -> Result<()> {
        let d = self.dims();
        if x.len() != d.n || u.len() != d.m {
            return Err(Error::Dimension(format!(
                "model {} expects x in R^{} and u in R^{}, got {} and {}",
                self.name,
                d.n,
                d.m,
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    pub fn f(&self, x: &[S], u: &[S], w: &[S]) -> Result<Vec<S>> {
        self.check_xu(x, u)?;
        if w.len() != self.q() {
            return Err(Error::Dimension(format!("w of dim {} for q = {}", w.len(), self.q())));
        }
        Ok(self.functions.dynamics(x, u, w))
    }

    pub fn h(&self, x: &[S], u: &[S]) -> Result<Vec<S>> {
        self.check_xu(x, u)?;
        Ok(self.functions.output(x, u))
    }

    /// Additive drift `f_a(x, u)`; errors for non-additive models.
    pub fn f_a(&self, x: &[S], u: &[S]) -> Result<Vec<S>> {
        self.check_xu(x, u)?;
        self.functions.drift(x, u).ok_or_else(|| Error::NotAdditive(self.name.clone()))
    }

    pub fn dynamics_jacobians(&self, x: &[S], u: &[S], w: &[S]) -> (Mat<S>, Mat<S>) {
        self.functions.dynamics_jacobians(x, u, w)
    }

    pub fn dynamics_curvature(&self, x: &[S], u: &[S], w: &[S], lambda: &[S]) -> Mat<S> {
        self.functions.dynamics_curvature(x, u, w, lambda)
    }

    pub fn output_curvature(&self, x: &[S], u: &[S], mu: &[S]) -> Mat<S> {
        self.functions.output_curvature(x, u, mu)
    }

    pub fn output_jacobian(&self, x: &[S], u: &[S]) -> Mat<S> {
        self.functions.output_jacobian(x, u)
    }
}

/// Lipschitz constants of `f_a` (or of `f` at `w = 0` for non-additive
/// models) and of `h` in `x`, taken as the largest Jacobian spectral norm on
/// a uniform grid over `audit_box` times `1 + margin`.
///
/// The inputs scanned are `u = 0` plus the vertices of `inputs` when that box
/// is bounded.
pub fn estimate_lipschitz<S: Scalar>(
    functions: &dyn ModelFunctions<S>,
    audit_box: &BoxSet<S>,
    inputs: &BoxSet<S>,
    points_per_axis: usize,
    margin: S,
) -> Result<(S, S)> {
    let d = functions.dims();
    if !audit_box.is_bounded() || audit_box.dim() != d.n {
        return Err(Error::InvalidArgument("Lipschitz audit box must be bounded with dimension n".into()));
    }
    let k = points_per_axis.max(2);
    let mut us = vec![vec![S::zero(); d.m]];
    if inputs.is_bounded() && d.m > 0 {
        us.extend(inputs.vertices());
    }
    let w0 = vec![S::zero(); d.q];
    let mut lf = S::zero();
    let mut lh = S::zero();
    let total = k.pow(d.n as u32);
    let mut x = vec![S::zero(); d.n];
    for idx in 0..total {
        let mut rem = idx;
        for i in 0..d.n {
            let step = rem % k;
            rem /= k;
            let t = S::lit(step as f64 / (k - 1) as f64);
            x[i] = audit_box.lower()[i] + t * (audit_box.upper()[i] - audit_box.lower()[i]);
        }
        for u in &us {
            let (fx, _) = functions.dynamics_jacobians(&x, u, &w0);
            lf = lf.max(spectral_norm(&fx));
            lh = lh.max(spectral_norm(&functions.output_jacobian(&x, u)));
        }
    }
    let scale = S::one() + margin;
    Ok((lf * scale, lh * scale))
}

/// Worst observed difference-quotient ratios from a random pair audit.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzAudit<S> {
    pub max_ratio_f: S,
    pub max_ratio_h: S,
    pub violations_f: usize,
    pub violations_h: usize,
    pub samples: usize,
}

/// Samples `samples` pairs `x₁, x₂` uniformly in `audit_box` and checks the
/// declared constants of `model` against the observed difference quotients.
pub fn lipschitz_audit<S: Scalar>(
    model: &SystemModel<S>,
    audit_box: &BoxSet<S>,
    samples: usize,
    seed: u64,
) -> Result<LipschitzAudit<S>> {
    if !audit_box.is_bounded() {
        return Err(Error::Unbounded("Lipschitz audit box".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dims();
    let u = vec![S::zero(); d.m];
    let w0 = vec![S::zero(); d.q];
    let draw = |rng: &mut ChaCha8Rng| -> Vec<S> {
        (0..d.n)
            .map(|i| {
                let t = S::lit(rng.gen::<f64>());
                audit_box.lower()[i] + t * (audit_box.upper()[i] - audit_box.lower()[i])
            })
            .collect()
    };
    let mut audit = LipschitzAudit {
        max_ratio_f: S::zero(),
        max_ratio_h: S::zero(),
        violations_f: 0,
        violations_h: 0,
        samples,
    };
    for _ in 0..samples {
        let x1 = draw(&mut rng);
        let x2 = draw(&mut rng);
        let dx = dist(&x1, &x2);
        if dx == S::zero() {
            continue;
        }
        let (f1, f2) = if model.is_additive() {
            (model.f_a(&x1, &u)?, model.f_a(&x2, &u)?)
        } else {
            (model.f(&x1, &u, &w0)?, model.f(&x2, &u, &w0)?)
        };
        let df = dist(&f1, &f2);
        let (h1, h2) = (model.h(&x1, &u)?, model.h(&x2, &u)?);
        let dh = dist(&h1, &h2);
        audit.max_ratio_f = audit.max_ratio_f.max(df / dx);
        audit.max_ratio_h = audit.max_ratio_h.max(dh / dx);
        // differences of function values carry rounding of their magnitude
        let slack = |a: &[S], b: &[S]| S::lit(4.0) * S::epsilon() * (norm2(a) + norm2(b));
        if df > model.lipschitz_f() * dx + slack(&f1, &f2) {
            audit.violations_f += 1;
        }
        if dh > model.lipschitz_h() * dx + slack(&h1, &h2) {
            audit.violations_h += 1;
        }
    }
    Ok(audit)
}
