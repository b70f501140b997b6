//! Row-major helpers for the gradient-free inference path.

use crate::tensor::kernels;

/// `x [n, k] · w [k, m] + b [m]`.
pub(crate) fn linear(x: &[f64], w: &[f64], b: &[f64], k: usize, m: usize) -> Vec<f64> {
    let n = x.len() / k;
    let mut out = vec![0.0; n * m];
    kernels::matmul(x, w, &mut out, n, k, m);
    for row in out.chunks_mut(m) {
        for (o, bi) in row.iter_mut().zip(b) {
            *o += bi;
        }
    }
    out
}

pub(crate) fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let (mut out, mut xhat, mut inv) = (vec![0.0; x.len()], vec![0.0; x.len()], vec![0.0; rows]);
    kernels::layer_norm_rows(x, d, gain, bias, eps, &mut out, &mut xhat, &mut inv);
    out
}

pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}
