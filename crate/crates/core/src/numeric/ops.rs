//! Capsule nonlinearities and small vector kernels.
//!
//! The tape in [`super::tape`] reuses these kernels for its forward pass, so
//! the standalone functions and the differentiable ops always agree.

use crate::error::{HapError, Result};
use crate::numeric::tensor::check_finite;

/// Slope of the negative branch of LeakyReLU used by the attention scores.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Scale factor `‖v‖ / (1 + ‖v‖²)` that squash applies to `v`.
pub(crate) fn squash_scale(norm: f64) -> f64 {
    norm / (1.0 + norm * norm)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(‖v‖² / (1 + ‖v‖²)) · v / ‖v‖`, with `squash(0) = 0`.
pub fn squash(v: &[f64]) -> Result<Vec<f64>> {
    check_finite("squash", v)?;
    let n = norm(v);
    if n == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let s = squash_scale(n);
    Ok(v.iter().map(|x| x * s).collect())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(HapError::Domain("softmax of an empty vector".into()));
    }
    check_finite("softmax", logits)?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Cosine similarity; 0 when either argument is the zero vector.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(HapError::shape("cosine_similarity", u.len(), v.len()));
    }
    check_finite("cosine_similarity", u)?;
    check_finite("cosine_similarity", v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// ELU with unit scale; continuously differentiable at 0.
pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}
