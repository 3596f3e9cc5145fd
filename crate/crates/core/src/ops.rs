//! Numerically stable scalar functions and the plain (untaped) forms of the
//! row softmax and target attention.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `log(1 + e^v)` without overflow. For large `v` this is `v` up to `e^-v`.
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub fn softmax_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    let c = out.cols();
    if c > 0 {
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
    }
    out
}

/// `softmax(q·Kᵀ / sqrt(d)) · V` for a single query row.
pub fn target_attention(q: &Tensor, keys: &Tensor, values: &Tensor, d: usize) -> Result<Tensor> {
    if keys.rows() == 0 {
        return Err(Error::EmptySequence("target attention over zero keys"));
    }
    if q.rows() != 1 || q.cols() != keys.cols() || keys.rows() != values.rows() || d == 0 {
        return Err(Error::Shape(format!(
            "target attention q {:?}, K {:?}, V {:?}, d {d}",
            q.shape(),
            keys.shape(),
            values.shape()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores = q.matmul(&keys.transpose())?.map(|v| v * scale);
    softmax_rows(&scores).matmul(values)
}
