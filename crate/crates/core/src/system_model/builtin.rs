//! Built-in example systems.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Mat;
use crate::scalar::Scalar;

use super::model::{estimate_lipschitz, Dims, ModelFunctions, SystemModel};
use super::sets::BoxSet;

/// `x⁺ = x + w`, `y = x + v` (no input).
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarIntegrator;

impl<S: Scalar> ModelFunctions<S> for ScalarIntegrator {
    fn dims(&self) -> Dims {
        Dims { n: 1, m: 0, q: 1, p: 1 }
    }

    fn dynamics(&self, x: &[S], _u: &[S], w: &[S]) -> Vec<S> {
        vec![x[0] + w[0]]
    }

    fn dynamics_jacobians(&self, _x: &[S], _u: &[S], _w: &[S]) -> (Mat<S>, Mat<S>) {
        (Mat::identity(1), Mat::identity(1))
    }

    fn output(&self, x: &[S], _u: &[S]) -> Vec<S> {
        vec![x[0]]
    }

    fn output_jacobian(&self, _x: &[S], _u: &[S]) -> Mat<S> {
        Mat::identity(1)
    }

    fn drift(&self, x: &[S], _u: &[S]) -> Option<Vec<S>> {
        Some(vec![x[0]])
    }

    fn dynamics_curvature(&self, _x: &[S], _u: &[S], _w: &[S], _lambda: &[S]) -> Mat<S> {
        Mat::zeros(2, 2)
    }

    fn output_curvature(&self, _x: &[S], _u: &[S], _mu: &[S]) -> Mat<S> {
        Mat::zeros(1, 1)
    }

    fn is_additive(&self) -> bool {
        true
    }
}

/// Euler-discretized reversible reaction `2A ⇌ B` with additive inputs and
/// disturbances, observed through the total concentration.
#[derive(Debug, Clone, Copy)]
pub struct BatchReactor<S> {
    pub k1: S,
    pub k2: S,
    pub dt: S,
}

impl<S: Scalar> Default for BatchReactor<S> {
    fn default() -> Self {
        Self { k1: S::lit(0.16), k2: S::lit(0.0064), dt: S::lit(0.1) }
    }
}

impl<S: Scalar> BatchReactor<S> {
    fn drift_unchecked(&self, x: &[S], u: &[S]) -> Vec<S> {
        let two = S::lit(2.0);
        let r = self.k1 * x[0] * x[0];
        vec![
            x[0] + self.dt * (-two * r + two * self.k2 * x[1]) + u[0],
            x[1] + self.dt * (r - self.k2 * x[1]) + u[1],
        ]
    }
}

impl<S: Scalar> ModelFunctions<S> for BatchReactor<S> {
    fn dims(&self) -> Dims {
        Dims { n: 2, m: 2, q: 2, p: 1 }
    }

    fn dynamics(&self, x: &[S], u: &[S], w: &[S]) -> Vec<S> {
        let mut next = self.drift_unchecked(x, u);
        next[0] = next[0] + w[0];
        next[1] = next[1] + w[1];
        next
    }

    fn dynamics_jacobians(&self, x: &[S], _u: &[S], _w: &[S]) -> (Mat<S>, Mat<S>) {
        let two = S::lit(2.0);
        let four = S::lit(4.0);
        let fx = Mat::from_rows(&[
            vec![S::one() - four * self.dt * self.k1 * x[0], two * self.dt * self.k2],
            vec![two * self.dt * self.k1 * x[0], S::one() - self.dt * self.k2],
        ]);
        (fx, Mat::identity(2))
    }

    fn output(&self, x: &[S], _u: &[S]) -> Vec<S> {
        vec![x[0] + x[1]]
    }

    fn output_jacobian(&self, _x: &[S], _u: &[S]) -> Mat<S> {
        Mat::from_rows(&[vec![S::one(), S::one()]])
    }

    fn drift(&self, x: &[S], u: &[S]) -> Option<Vec<S>> {
        Some(self.drift_unchecked(x, u))
    }

    fn dynamics_curvature(&self, _x: &[S], _u: &[S], _w: &[S], lambda: &[S]) -> Mat<S> {
        let mut m = Mat::zeros(4, 4);
        m[(0, 0)] = self.dt * self.k1 * (S::lit(-4.0) * lambda[0] + S::lit(2.0) * lambda[1]);
        m
    }

    fn output_curvature(&self, _x: &[S], _u: &[S], _mu: &[S]) -> Mat<S> {
        Mat::zeros(2, 2)
    }

    fn is_additive(&self) -> bool {
        true
    }
}

/// Scalar system with a non-additive disturbance channel and a cubic output:
/// `x⁺ = a x + tanh(w) + u`, `y = x + 0.1 x³`.
#[derive(Debug, Clone, Copy)]
pub struct SaturatingScalar<S> {
    pub a: S,
}

impl<S: Scalar> Default for SaturatingScalar<S> {
    fn default() -> Self {
        Self { a: S::lit(0.9) }
    }
}

impl<S: Scalar> ModelFunctions<S> for SaturatingScalar<S> {
    fn dims(&self) -> Dims {
        Dims { n: 1, m: 1, q: 1, p: 1 }
    }

    fn dynamics(&self, x: &[S], u: &[S], w: &[S]) -> Vec<S> {
        vec![self.a * x[0] + w[0].tanh() + u[0]]
    }

    fn dynamics_jacobians(&self, _x: &[S], _u: &[S], w: &[S]) -> (Mat<S>, Mat<S>) {
        let t = w[0].tanh();
        (Mat::diag(&[self.a]), Mat::diag(&[S::one() - t * t]))
    }

    fn output(&self, x: &[S], _u: &[S]) -> Vec<S> {
        vec![x[0] + S::lit(0.1) * x[0] * x[0] * x[0]]
    }

    fn output_jacobian(&self, x: &[S], _u: &[S]) -> Mat<S> {
        Mat::diag(&[S::one() + S::lit(0.3) * x[0] * x[0]])
    }

    fn dynamics_curvature(&self, _x: &[S], _u: &[S], w: &[S], lambda: &[S]) -> Mat<S> {
        let t = w[0].tanh();
        let d2 = S::lit(-2.0) * t * (S::one() - t * t);
        Mat::diag(&[S::zero(), lambda[0] * d2])
    }

    fn output_curvature(&self, x: &[S], _u: &[S], mu: &[S]) -> Mat<S> {
        Mat::diag(&[mu[0] * S::lit(0.6) * x[0]])
    }

    fn is_additive(&self) -> bool {
        false
    }
}

/// Serializable reference to a built-in model and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelSpec {
    ScalarIntegrator,
    BatchReactor {
        #[serde(default = "default_k1")]
        k1: f64,
        #[serde(default = "default_k2")]
        k2: f64,
        #[serde(default = "default_dt")]
        dt: f64,
    },
    SaturatingScalar {
        #[serde(default = "default_a")]
        a: f64,
    },
}

fn default_k1() -> f64 {
    0.16
}
fn default_k2() -> f64 {
    0.0064
}
fn default_dt() -> f64 {
    0.1
}
fn default_a() -> f64 {
    0.9
}

impl ModelSpec {
    pub fn batch_reactor() -> Self {
        Self::BatchReactor { k1: default_k1(), k2: default_k2(), dt: default_dt() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ScalarIntegrator => "scalar_integrator",
            Self::BatchReactor { .. } => "batch_reactor",
            Self::SaturatingScalar { .. } => "saturating_scalar",
        }
    }

    /// Instantiates the model, estimating Lipschitz constants over the
    /// model's audit box where they are not known in closed form.
    pub fn build<S: Scalar>(&self) -> Result<SystemModel<S>> {
        match *self {
            Self::ScalarIntegrator => {
                SystemModel::new(self.name(), Arc::new(ScalarIntegrator), S::one(), S::one(), vec![S::zero()])
            }
            Self::BatchReactor { k1, k2, dt } => {
                let functions = BatchReactor { k1: S::lit(k1), k2: S::lit(k2), dt: S::lit(dt) };
                let (lf, lh) = estimate_lipschitz(
                    &functions,
                    &reactor_audit_box(),
                    &BoxSet::unbounded(2),
                    41,
                    S::lit(1e-3),
                )?;
                SystemModel::new(self.name(), Arc::new(functions), lf, lh, vec![S::lit(3.0), S::zero()])
            }
            Self::SaturatingScalar { a } => {
                let functions = SaturatingScalar { a: S::lit(a) };
                let audit = BoxSet::new(vec![S::lit(-2.0)], vec![S::lit(2.0)])?;
                let (_, lh) = estimate_lipschitz(&functions, &audit, &BoxSet::unbounded(1), 81, S::lit(1e-3))?;
                SystemModel::new(self.name(), Arc::new(functions), S::lit(a.abs().max(1e-12)), lh, vec![S::zero()])
            }
        }
    }

    /// Compact box on which the declared Lipschitz constants are guaranteed.
    pub fn audit_box<S: Scalar>(&self) -> BoxSet<S> {
        match self {
            Self::ScalarIntegrator => BoxSet::symmetric(1, S::lit(100.0)),
            Self::BatchReactor { .. } => reactor_audit_box(),
            Self::SaturatingScalar { .. } => BoxSet::symmetric(1, S::lit(2.0)),
        }
    }
}

fn reactor_audit_box<S: Scalar>() -> BoxSet<S> {
    BoxSet::new(vec![S::zero(), S::zero()], vec![S::lit(4.0), S::lit(2.0)]).expect("static box")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reactor_one_step_from_initial_state() {
        let model: SystemModel<f64> = ModelSpec::batch_reactor().build().unwrap();
        let next = model.f(&[3.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((next[0] - 2.712).abs() < 1e-12);
        assert!((next[1] - 0.144).abs() < 1e-12);
    }

    #[test]
    fn additive_models_split_exactly() {
        let model: SystemModel<f64> = ModelSpec::batch_reactor().build().unwrap();
        let x = [1.3, 0.4];
        let u = [0.2, -0.1];
        let w = [0.03, -0.02];
        let full = model.f(&x, &u, &w).unwrap();
        let drift = model.f_a(&x, &u).unwrap();
        assert_eq!(full[0], drift[0] + w[0]);
        assert_eq!(full[1], drift[1] + w[1]);
    }

    #[test]
    fn non_additive_model_has_no_drift() {
        let model: SystemModel<f64> = ModelSpec::SaturatingScalar { a: 0.9 }.build().unwrap();
        assert!(!model.is_additive());
        assert!(model.f_a(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn reactor_output_lipschitz_is_sqrt2_within_margin() {
        let model: SystemModel<f64> = ModelSpec::batch_reactor().build().unwrap();
        let lh = model.lipschitz_h();
        assert!(lh >= 2f64.sqrt() && lh <= 2f64.sqrt() * 1.0011);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ModelSpec::batch_reactor();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"batch_reactor\""));
        assert_eq!(serde_json::from_str::<ModelSpec>(&json).unwrap(), spec);
        let short: ModelSpec = serde_json::from_str(r#"{"name":"batch_reactor"}"#).unwrap();
        assert_eq!(short, spec);
    }

    /// Forwards only the required methods so the trait's finite-difference
    /// curvature defaults are exercised.
    #[derive(Debug)]
    struct Plain<M>(M);

    impl<M: ModelFunctions<f64>> ModelFunctions<f64> for Plain<M> {
        fn dims(&self) -> Dims {
            self.0.dims()
        }
        fn dynamics(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
            self.0.dynamics(x, u, w)
        }
        fn dynamics_jacobians(&self, x: &[f64], u: &[f64], w: &[f64]) -> (Mat<f64>, Mat<f64>) {
            self.0.dynamics_jacobians(x, u, w)
        }
        fn output(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
            self.0.output(x, u)
        }
        fn output_jacobian(&self, x: &[f64], u: &[f64]) -> Mat<f64> {
            self.0.output_jacobian(x, u)
        }
        fn is_additive(&self) -> bool {
            self.0.is_additive()
        }
    }

    fn max_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
        a.row_major().iter().zip(b.row_major()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn analytic_curvature_matches_finite_differences() {
        let reactor = BatchReactor::<f64>::default();
        let (x, u, w, lam) = ([1.3, 0.4], [0.1, 0.0], [0.02, -0.01], [0.7, -1.9]);
        let exact = reactor.dynamics_curvature(&x, &u, &w, &lam);
        assert!(max_diff(&exact, &Plain(reactor).dynamics_curvature(&x, &u, &w, &lam)) < 1e-7);

        let sat = SaturatingScalar::<f64>::default();
        let (x, u, w) = ([0.8], [0.2], [0.6]);
        let exact = sat.dynamics_curvature(&x, &u, &w, &[1.5]);
        assert!(max_diff(&exact, &Plain(sat).dynamics_curvature(&x, &u, &w, &[1.5])) < 1e-7);
        let exact = sat.output_curvature(&x, &u, &[-0.4]);
        assert!(max_diff(&exact, &Plain(sat).output_curvature(&x, &u, &[-0.4])) < 1e-7);
    }
}
