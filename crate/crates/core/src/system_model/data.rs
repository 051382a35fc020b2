use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Time-indexed input/output record `d_j = (u_j, y_j)`, `j = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch<S> {
    m: usize,
    p: usize,
    inputs: Vec<Vec<S>>,
    outputs: Vec<Vec<S>>,
}

impl<S: Scalar> DataBatch<S> {
    pub fn new(m: usize, p: usize, inputs: Vec<Vec<S>>, outputs: Vec<Vec<S>>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::Length(format!("{} inputs vs {} outputs", inputs.len(), outputs.len())));
        }
        if inputs.is_empty() {
            return Err(Error::Length("data batch needs at least one sample".into()));
        }
        if let Some(j) = inputs.iter().position(|u| u.len() != m) {
            return Err(Error::Dimension(format!("input {j} has dim {} (m = {m})", inputs[j].len())));
        }
        if let Some(j) = outputs.iter().position(|y| y.len() != p) {
            return Err(Error::Dimension(format!("output {j} has dim {} (p = {p})", outputs[j].len())));
        }
        Ok(Self { m, p, inputs, outputs })
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.p
    }

    /// Number of samples, `T + 1`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> usize {
        self.len() - 1
    }

    pub fn u(&self, j: usize) -> &[S] {
        &self.inputs[j]
    }

    pub fn y(&self, j: usize) -> &[S] {
        &self.outputs[j]
    }

    pub fn inputs(&self) -> &[Vec<S>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Vec<S>] {
        &self.outputs
    }

    /// The slice `d_{τ:τ+N}` (`N + 1` samples).
    pub fn window(&self, tau: usize, n: usize) -> Result<Self> {
        if tau + n > self.horizon() {
            return Err(Error::Length(format!("window [{tau}, {}] exceeds horizon {}", tau + n, self.horizon())));
        }
        Ok(Self {
            m: self.m,
            p: self.p,
            inputs: self.inputs[tau..=tau + n].to_vec(),
            outputs: self.outputs[tau..=tau + n].to_vec(),
        })
    }

    /// Hash of the exact bit patterns, for cache keys.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.m.hash(&mut h);
        self.p.hash(&mut h);
        for (u, y) in self.inputs.iter().zip(&self.outputs) {
            for v in u.iter().chain(y) {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// CSV with header `t,u_0..u_{m-1},y_0..y_{p-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.m).map(|i| format!("u_{i}")));
        header.extend((0..self.p).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        for (t, (u, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(u.iter().chain(y).map(|v| format!("{}", v.as_f64())));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let m = header.iter().filter(|h| h.starts_with("u_")).count();
        let p = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.len() != 1 + m + p || header.get(0) != Some("t") {
            return Err(Error::Config(format!("unexpected data header {header:?}")));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (row_idx, rec) in r.records().enumerate() {
            let rec = rec?;
            let t: usize = rec[0].parse().map_err(|_| Error::Config(format!("bad time index in row {row_idx}")))?;
            if t != row_idx {
                return Err(Error::Config(format!("row {row_idx} has t = {t}")));
            }
            let parse = |s: &str| -> Result<S> {
                s.parse::<f64>().map(S::lit).map_err(|_| Error::Config(format!("bad number {s:?}")))
            };
            inputs.push((1..=m).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?);
            outputs.push((1 + m..1 + m + p).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?);
        }
        Self::new(m, p, inputs, outputs)
    }
}
