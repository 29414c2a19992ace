//! Dense `f64` tensors, a reverse-mode gradient tape, and the handful of
//! operations the tracker needs.

mod kernels;
pub mod gradcheck;
pub mod nn;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use ops::{
    cosine_similarity, gelu, layer_norm, layer_norm_var, linear_var, matmul, mean_pool_tokens,
    mlp2, mlp2_var, sigmoid, softmax_rows, LN_EPS,
};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Tape entry point for a whole-store loss: binds `store`, builds the loss
/// with `f`, runs backward, and returns the loss value with the per-tensor
/// gradients in store order.
pub fn value_and_grad<F>(store: &ParamStore, f: F) -> crate::Result<(f64, Vec<Option<Vec<f64>>>)>
where
    F: FnOnce(&mut Tape, &Bound) -> crate::Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;
    let grads = bound
        .grads(&tape)
        .into_iter()
        .map(|g| g.map(<[f64]>::to_vec))
        .collect();
    Ok((tape.value(loss).item(), grads))
}
