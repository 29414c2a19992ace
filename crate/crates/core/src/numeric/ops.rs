//! Eager tensor operations. Differentiable ones run through a throwaway
//! [`Tape`] so there is a single implementation of each formula.

use super::kernels;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        kernels::matmul(a.data(), b.data(), m, k, n),
    ))
}

pub fn softmax_rows(a: &Tensor) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        kernels::softmax_rows(a.data(), a.rows(), a.cols()),
    )
}

/// `LN(x) = gain ⊙ (x − μ)/sqrt(σ² + eps) + bias` over the last axis.
pub fn layer_norm_var(tape: &mut Tape, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let n = tape.normalize_rows(x, eps);
    let g = tape.mul_row(n, gain)?;
    tape.add_row(g, bias)
}

pub fn layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::arg("layer_norm eps must be positive"));
    }
    let mut tape = Tape::new();
    let (x, g, b) = (
        tape.constant(a.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let y = layer_norm_var(&mut tape, x, g, b, eps)?;
    Ok(tape.value(y).clone())
}

/// `x·w + b` with `b` broadcast over rows.
pub fn linear_var(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Two-layer perceptron `GELU(x·w1 + b1)·w2 + b2`.
pub fn mlp2_var(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = linear_var(tape, x, w1, b1)?;
    let h = tape.gelu(h);
    linear_var(tape, h, w2, b2)
}

pub fn mlp2(a: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = [a, w1, b1, w2, b2]
        .into_iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let y = mlp2_var(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4])?;
    Ok(tape.value(y).clone())
}

pub fn gelu(x: f64) -> f64 {
    kernels::gelu(x)
}

pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

/// Arithmetic mean over the token axis, `[N×C] → [1×C]`.
pub fn mean_pool_tokens(a: &Tensor) -> Result<Tensor> {
    if a.rows() == 0 {
        return Err(Error::EmptyInput("mean_pool_tokens"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = tape.mean_rows(x)?;
    Ok(tape.value(y).clone())
}

/// `u·v / sqrt(‖u‖²‖v‖²)`, clamped to `[-1, 1]`. A vector compared with
/// itself gives exactly 1.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let su = u.iter().map(|x| x * x).sum::<f64>();
    let sv = v.iter().map(|x| x * x).sum::<f64>();
    if su == 0.0 || sv == 0.0 {
        return Err(Error::DegenerateVector("cosine_similarity"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (su * sv).sqrt()).clamp(-1.0, 1.0))
}
