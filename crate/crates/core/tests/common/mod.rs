#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use turnpike_estimation::system_model::{DataBatch, SystemModel};

/// Dense least-squares solution of the scalar-integrator estimation problem
/// `min Σ_{j<T} q w_j² + r (y_j − x_j)² + g (y_T − x_T)²` with
/// `x_{j+1} = x_j + w_j`, over `(x_0, w_0, …, w_{T−1})`. Returns states,
/// disturbances and the optimal cost.
pub fn integrator_oracle(y: &[f64], q: f64, r: f64, g: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let t = y.len() - 1;
    let nv = t + 1;
    let mut a = DMatrix::<f64>::zeros(2 * t + 1, nv);
    let mut b = DVector::<f64>::zeros(2 * t + 1);
    // x_j = x_0 + Σ_{i<j} w_i, so row j of the state map has ones in
    // columns 0 and 1..=j
    let state_row = |j: usize| (0..nv).map(move |c| if c == 0 || c <= j { 1.0 } else { 0.0 });
    for j in 0..t {
        a[(j, j + 1)] = q.sqrt();
        for (c, v) in state_row(j).enumerate() {
            a[(t + j, c)] = r.sqrt() * v;
        }
        b[t + j] = r.sqrt() * y[j];
    }
    for (c, v) in state_row(t).enumerate() {
        a[(2 * t, c)] = g.sqrt() * v;
    }
    b[2 * t] = g.sqrt() * y[t];
    let z = a.clone().svd(true, true).solve(&b, 1e-14).expect("least-squares solve");
    let resid = &a * &z - &b;
    let w: Vec<f64> = (1..nv).map(|c| z[c]).collect();
    let mut x = vec![z[0]];
    for wj in &w {
        let last = *x.last().unwrap();
        x.push(last + wj);
    }
    (x, w, resid.norm_squared())
}

pub fn sup_dist(a: &[Vec<f64>], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u[0] - v).abs()).fold(0.0, f64::max)
}

/// Central difference of `f` along coordinate `i` with relative step.
pub fn central(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], i: usize) -> Vec<f64> {
    let h = 1e-6 * x[i].abs().max(1.0);
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    f(&xp).iter().zip(f(&xm)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// `‖A − B‖∞ / max(‖A‖∞, 1e-8)` over all entries.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let num = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let den = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1e-8);
    num / den
}

/// Finite-difference Jacobians of `f` and `h` at `(x, u, w)`,
/// beside the analytic ones, flattened row-major.
pub fn jacobian_pairs(model: &SystemModel<f64>, x: &[f64], u: &[f64], w: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let n = model.n();
    let (fx, fw) = model.dynamics_jacobians(x, u, w);
    let hx = model.output_jacobian(x, u);
    let fd = |g: &dyn Fn(&[f64]) -> Vec<f64>, at: &[f64], rows: usize| {
        let cols: Vec<Vec<f64>> = (0..at.len()).map(|i| central(g, at, i)).collect();
        let mut out = vec![0.0; rows * at.len()];
        for (c, col) in cols.iter().enumerate() {
            for r in 0..rows {
                out[r * at.len() + c] = col[r];
            }
        }
        out
    };
    let f_of_x = |xv: &[f64]| model.f(xv, u, w).unwrap();
    let f_of_w = |wv: &[f64]| model.f(x, u, wv).unwrap();
    let h_of_x = |xv: &[f64]| model.h(xv, u).unwrap();
    vec![
        (fx.row_major().to_vec(), fd(&f_of_x, x, n)),
        (fw.row_major().to_vec(), fd(&f_of_w, w, n)),
        (hx.row_major().to_vec(), fd(&h_of_x, x, model.p())),
    ]
}

pub fn data_from(y: &[f64]) -> DataBatch<f64> {
    DataBatch::new(0, 1, vec![vec![]; y.len()], y.iter().map(|v| vec![*v]).collect()).unwrap()
}
