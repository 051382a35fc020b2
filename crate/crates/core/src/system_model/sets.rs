use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned closed box. Unbounded sides are stored as `±∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet<S> {
    lower: Vec<S>,
    upper: Vec<S>,
}

impl<S: Scalar> BoxSet<S> {
    pub fn new(lower: Vec<S>, upper: Vec<S>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!("box bounds {} vs {}", lower.len(), upper.len())));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(Error::InvalidArgument(format!("box side {i}: lower {l} > upper {u}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// All of `R^dim`.
    pub fn unbounded(dim: usize) -> Self {
        Self { lower: vec![S::neg_infinity(); dim], upper: vec![S::infinity(); dim] }
    }

    /// `{ z : |z_i| <= radius }`.
    pub fn symmetric(dim: usize, radius: S) -> Self {
        let r = radius.abs();
        Self { lower: vec![-r; dim], upper: vec![r; dim] }
    }

    /// The single point `{ value }`.
    pub fn point(value: &[S]) -> Self {
        Self { lower: value.to_vec(), upper: value.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[S] {
        &self.lower
    }

    pub fn upper(&self) -> &[S] {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    pub fn is_unbounded_everywhere(&self) -> bool {
        self.lower.iter().all(|v| *v == S::neg_infinity()) && self.upper.iter().all(|v| *v == S::infinity())
    }

    /// Closed-box membership with inclusive bounds.
    pub fn contains(&self, z: &[S]) -> Result<bool> {
        if z.len() != self.dim() {
            return Err(Error::Dimension(format!("point of dim {} vs box of dim {}", z.len(), self.dim())));
        }
        Ok(z.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *v >= *l && *v <= *u))
    }

    /// Box vertices (`2^dim` of them). Only meaningful for bounded boxes.
    pub fn vertices(&self) -> Vec<Vec<S>> {
        let d = self.dim();
        (0..(1usize << d))
            .map(|mask| (0..d).map(|i| if mask >> i & 1 == 1 { self.upper[i] } else { self.lower[i] }).collect())
            .collect()
    }

    /// Midpoint of each side, falling back to the finite bound or zero.
    pub fn center(&self) -> Vec<S> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| match (l.is_finite(), u.is_finite()) {
                (true, true) => (*l + *u) / S::lit(2.0),
                (true, false) => *l + S::one(),
                (false, true) => *u - S::one(),
                (false, false) => S::zero(),
            })
            .collect()
    }

    pub fn to_doc(&self) -> BoxDoc {
        let conv = |v: &S| if v.is_finite() { Some(v.as_f64()) } else { None };
        BoxDoc { lower: self.lower.iter().map(conv).collect(), upper: self.upper.iter().map(conv).collect() }
    }

    pub fn from_doc(doc: &BoxDoc) -> Result<Self> {
        let lower = doc.lower.iter().map(|v| v.map_or(S::neg_infinity(), S::lit)).collect();
        let upper = doc.upper.iter().map(|v| v.map_or(S::infinity(), S::lit)).collect();
        Self::new(lower, upper)
    }
}

/// JSON form of a box; `null` marks an unbounded side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDoc {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

/// Constraint sets `X × U × W × V`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSets<S> {
    pub states: BoxSet<S>,
    pub inputs: BoxSet<S>,
    pub disturbances: BoxSet<S>,
    pub noise: BoxSet<S>,
}

impl<S: Scalar> ConstraintSets<S> {
    pub fn unbounded(n: usize, m: usize, q: usize, p: usize) -> Self {
        Self {
            states: BoxSet::unbounded(n),
            inputs: BoxSet::unbounded(m),
            disturbances: BoxSet::unbounded(q),
            noise: BoxSet::unbounded(p),
        }
    }

    /// True iff `(x, u, w, v)` lies in all four boxes.
    pub fn membership(&self, x: &[S], u: &[S], w: &[S], v: &[S]) -> Result<bool> {
        Ok(self.states.contains(x)?
            && self.inputs.contains(u)?
            && self.disturbances.contains(w)?
            && self.noise.contains(v)?)
    }

    pub fn to_doc(&self) -> SetsDoc {
        SetsDoc {
            states: self.states.to_doc(),
            inputs: self.inputs.to_doc(),
            disturbances: self.disturbances.to_doc(),
            noise: self.noise.to_doc(),
        }
    }

    pub fn from_doc(doc: &SetsDoc) -> Result<Self> {
        Ok(Self {
            states: BoxSet::from_doc(&doc.states)?,
            inputs: BoxSet::from_doc(&doc.inputs)?,
            disturbances: BoxSet::from_doc(&doc.disturbances)?,
            noise: BoxSet::from_doc(&doc.noise)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetsDoc {
    pub states: BoxDoc,
    pub inputs: BoxDoc,
    pub disturbances: BoxDoc,
    pub noise: BoxDoc,
}
