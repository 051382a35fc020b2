use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostWeights, TerminalMode, WeightsDoc};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::builtin::ModelSpec;
use super::data::DataBatch;
use super::model::SystemModel;
use super::sets::{BoxSet, ConstraintSets, SetsDoc};

/// Per-step law for disturbances or measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseLaw<S> {
    /// Independent uniform draws on the corresponding box of the scenario's
    /// constraint sets.
    Uniform,
    /// The same vector at every step.
    Constant(Vec<S>),
}

/// Input schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum InputLaw<S> {
    Zero,
    Constant(Vec<S>),
    /// `u_j = 0` except at the listed times, where the input is chosen so
    /// that `x_{j+1} = target + w_j`. Requires the input to enter the
    /// dynamics additively with `m = n`.
    Resets { times: Vec<usize>, target: Vec<S> },
}

/// A model, its constraint sets, an initial state, horizon and the laws that
/// generate data.
#[derive(Debug, Clone)]
pub struct Scenario<S: Scalar> {
    pub spec: ModelSpec,
    pub model: SystemModel<S>,
    /// Sets the generated data must respect.
    pub sets: ConstraintSets<S>,
    /// Sets imposed in the estimation problems.
    pub solve_sets: ConstraintSets<S>,
    pub x0: Vec<S>,
    pub horizon: usize,
    pub seed: u64,
    pub disturbance: NoiseLaw<S>,
    pub noise: NoiseLaw<S>,
    pub inputs: InputLaw<S>,
    pub weights: CostWeights<S>,
}

/// Output of [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation<S> {
    pub states: Vec<Vec<S>>,
    pub data: DataBatch<S>,
    pub disturbances: Vec<Vec<S>>,
    pub noise: Vec<Vec<S>>,
}

fn draw<S: Scalar>(law: &NoiseLaw<S>, bx: &BoxSet<S>, rng: &mut ChaCha8Rng, label: &str) -> Result<Vec<S>> {
    match law {
        NoiseLaw::Constant(v) => {
            if v.len() != bx.dim() {
                return Err(Error::Dimension(format!("constant {label} of dim {} vs {}", v.len(), bx.dim())));
            }
            Ok(v.clone())
        }
        NoiseLaw::Uniform => {
            if !bx.is_bounded() {
                return Err(Error::Unbounded(format!("uniform {label} law needs a bounded box")));
            }
            Ok((0..bx.dim())
                .map(|i| {
                    let (lo, hi) = (bx.lower()[i].as_f64(), bx.upper()[i].as_f64());
                    if lo == hi {
                        S::lit(lo)
                    } else {
                        S::lit(rng.gen_range(lo..=hi))
                    }
                })
                .collect())
        }
    }
}

/// Forward rollout of `scenario` with all randomness fixed by `seed`.
///
/// Checks `(x_t, u_t, w_t, v_t) ∈ C` at every step and that every state is
/// finite.
pub fn simulate<S: Scalar>(scenario: &Scenario<S>, seed: u64) -> Result<Simulation<S>> {
    let model = &scenario.model;
    let d = model.dims();
    if scenario.x0.len() != d.n {
        return Err(Error::Dimension(format!("x0 of dim {} for n = {}", scenario.x0.len(), d.n)));
    }
    let t_end = scenario.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(t_end + 1);
    let mut inputs = Vec::with_capacity(t_end + 1);
    let mut outputs = Vec::with_capacity(t_end + 1);
    let mut disturbances = Vec::with_capacity(t_end);
    let mut noise = Vec::with_capacity(t_end + 1);
    let mut x = scenario.x0.clone();
    let zero_u = vec![S::zero(); d.m];
    let zero_w = vec![S::zero(); d.q];
    for t in 0..=t_end {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state at t = {t}")));
        }
        let w = if t < t_end { Some(draw(&scenario.disturbance, &scenario.sets.disturbances, &mut rng, "disturbance")?) } else { None };
        let v = draw(&scenario.noise, &scenario.sets.noise, &mut rng, "noise")?;
        let u = match &scenario.inputs {
            InputLaw::Zero => zero_u.clone(),
            InputLaw::Constant(u) => u.clone(),
            InputLaw::Resets { times, target } => {
                if times.contains(&t) {
                    if d.m != d.n || target.len() != d.n {
                        return Err(Error::Dimension("reset inputs need m = n = dim(target)".into()));
                    }
                    let free = model.f(&x, &zero_u, &zero_w)?;
                    target.iter().zip(&free).map(|(a, b)| *a - *b).collect()
                } else {
                    zero_u.clone()
                }
            }
        };
        let w_check = w.clone().unwrap_or_else(|| scenario.sets.disturbances.center());
        let inside = if w.is_some() {
            scenario.sets.membership(&x, &u, &w_check, &v)?
        } else {
            scenario.sets.states.contains(&x)? && scenario.sets.inputs.contains(&u)? && scenario.sets.noise.contains(&v)?
        };
        if !inside {
            return Err(Error::ConstraintViolation(format!("(x, u, w, v) leaves C at t = {t}")));
        }
        let hx = model.h(&x, &u)?;
        outputs.push(hx.iter().zip(&v).map(|(a, b)| *a + *b).collect());
        noise.push(v);
        states.push(x.clone());
        if let Some(w) = w {
            let next = model.f(&x, &u, &w)?;
            if let InputLaw::Resets { times, target } = &scenario.inputs {
                if times.contains(&t) {
                    let expect: Vec<S> = target.iter().zip(&w).map(|(a, b)| *a + *b).collect();
                    let off = expect.iter().zip(&next).fold(S::zero(), |m, (a, b)| m.max((*a - *b).abs()));
                    if off > S::lit(1e-9) * (S::one() + crate::linalg::norm_inf(target)) {
                        return Err(Error::InvalidArgument("model input is not additive; resets unsupported".into()));
                    }
                }
            }
            disturbances.push(w);
            x = next;
        }
        inputs.push(u);
    }
    let data = DataBatch::new(d.m, d.p, inputs, outputs)?;
    Ok(Simulation { states, data, disturbances, noise })
}

/// Reset times `50 i` for `i ∈ [1, ⌊(T−1)/50⌋]`.
pub fn reactor_reset_times(horizon: usize) -> Vec<usize> {
    if horizon == 0 {
        return Vec::new();
    }
    (1..=(horizon - 1) / 50).map(|i| 50 * i).collect()
}

/// Scalar integrator with constant unit disturbance and noise, `x0 = 1`,
/// `Q = R = G = 1`, no constraints.
pub fn motivating_scenario<S: Scalar>(horizon: usize) -> Result<Scenario<S>> {
    let spec = ModelSpec::ScalarIntegrator;
    let model = spec.build()?;
    let sets = ConstraintSets::unbounded(1, 0, 1, 1);
    Ok(Scenario {
        spec,
        model,
        solve_sets: sets.clone(),
        sets,
        x0: vec![S::one()],
        horizon,
        seed: 0,
        disturbance: NoiseLaw::Constant(vec![S::one()]),
        noise: NoiseLaw::Constant(vec![S::one()]),
        inputs: InputLaw::Zero,
        weights: CostWeights::identity(1, 1, TerminalMode::Filtering),
    })
}

/// Batch reactor from `x0 = [3, 0]` with `|w_i| ≤ 0.05`, `|v| ≤ 0.5`, and
/// empty-and-refill resets every 50 steps.
///
/// The estimation problems keep `|y − h(x)| ≤ 0.5` and leave states and
/// disturbances unconstrained.
pub fn batch_reactor_scenario<S: Scalar>(horizon: usize, seed: u64) -> Result<Scenario<S>> {
    let spec = ModelSpec::batch_reactor();
    let model = spec.build()?;
    let sets = ConstraintSets {
        states: BoxSet::unbounded(2),
        inputs: BoxSet::unbounded(2),
        disturbances: BoxSet::symmetric(2, S::lit(0.05)),
        noise: BoxSet::symmetric(1, S::lit(0.5)),
    };
    let solve_sets = ConstraintSets {
        states: BoxSet::unbounded(2),
        inputs: BoxSet::unbounded(2),
        disturbances: BoxSet::unbounded(2),
        noise: BoxSet::symmetric(1, S::lit(0.5)),
    };
    Ok(Scenario {
        spec,
        model,
        sets,
        solve_sets,
        x0: vec![S::lit(3.0), S::zero()],
        horizon,
        seed,
        disturbance: NoiseLaw::Uniform,
        noise: NoiseLaw::Uniform,
        inputs: InputLaw::Resets { times: reactor_reset_times(horizon), target: vec![S::lit(3.0), S::zero()] },
        weights: CostWeights::identity(2, 1, TerminalMode::Filtering),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseLawDoc {
    Uniform,
    Constant { value: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLawDoc {
    Zero,
    Constant { value: Vec<f64> },
    Resets { times: Vec<usize>, target: Vec<f64> },
}

/// JSON document describing a [`Scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    pub model: ModelSpec,
    pub horizon: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub sets: SetsDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_sets: Option<SetsDoc>,
    pub disturbance: NoiseLawDoc,
    pub noise: NoiseLawDoc,
    pub inputs: InputLawDoc,
    pub weights: WeightsDoc,
}

impl<S: Scalar> Scenario<S> {
    pub fn to_doc(&self) -> ScenarioDoc {
        let vec = |v: &[S]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let law = |l: &NoiseLaw<S>| match l {
            NoiseLaw::Uniform => NoiseLawDoc::Uniform,
            NoiseLaw::Constant(v) => NoiseLawDoc::Constant { value: vec(v) },
        };
        ScenarioDoc {
            model: self.spec.clone(),
            horizon: self.horizon,
            seed: self.seed,
            x0: vec(&self.x0),
            sets: self.sets.to_doc(),
            solve_sets: if self.solve_sets == self.sets { None } else { Some(self.solve_sets.to_doc()) },
            disturbance: law(&self.disturbance),
            noise: law(&self.noise),
            inputs: match &self.inputs {
                InputLaw::Zero => InputLawDoc::Zero,
                InputLaw::Constant(v) => InputLawDoc::Constant { value: vec(v) },
                InputLaw::Resets { times, target } => InputLawDoc::Resets { times: times.clone(), target: vec(target) },
            },
            weights: self.weights.to_doc(),
        }
    }

    pub fn from_doc(doc: &ScenarioDoc) -> Result<Self> {
        let model: SystemModel<S> = doc.model.build()?;
        let vec = |v: &[f64]| v.iter().map(|x| S::lit(*x)).collect::<Vec<S>>();
        let law = |l: &NoiseLawDoc| match l {
            NoiseLawDoc::Uniform => NoiseLaw::Uniform,
            NoiseLawDoc::Constant { value } => NoiseLaw::Constant(vec(value)),
        };
        let sets = ConstraintSets::from_doc(&doc.sets)?;
        let solve_sets = match &doc.solve_sets {
            Some(s) => ConstraintSets::from_doc(s)?,
            None => sets.clone(),
        };
        let d = model.dims();
        for (label, b, dim) in [
            ("states", &sets.states, d.n),
            ("inputs", &sets.inputs, d.m),
            ("disturbances", &sets.disturbances, d.q),
            ("noise", &sets.noise, d.p),
        ] {
            if b.dim() != dim {
                return Err(Error::Config(format!("{label} box has dim {}, model needs {dim}", b.dim())));
            }
        }
        let weights = CostWeights::from_doc(&doc.weights)?;
        if weights.disturbance_dim() != d.q || weights.output_dim() != d.p {
            return Err(Error::Config("weights do not match model dimensions".into()));
        }
        Ok(Self {
            spec: doc.model.clone(),
            model,
            sets,
            solve_sets,
            x0: vec(&doc.x0),
            horizon: doc.horizon,
            seed: doc.seed,
            disturbance: law(&doc.disturbance),
            noise: law(&doc.noise),
            inputs: match &doc.inputs {
                InputLawDoc::Zero => InputLaw::Zero,
                InputLawDoc::Constant { value } => InputLaw::Constant(vec(value)),
                InputLawDoc::Resets { times, target } => InputLaw::Resets { times: times.clone(), target: vec(target) },
            },
            weights,
        })
    }
}
