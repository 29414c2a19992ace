//! Parameter groups for the common layers, registered in a [`ParamStore`].

use rand::Rng;

use super::{layer_norm_var, Bound, ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};
use crate::error::Result;

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng).with_grad()
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(&[fan_in, fan_out], fan_in, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]).with_grad());
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        super::linear_var(tape, x, p[self.w], p[self.b])
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, output, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        super::mlp2_var(tape, x, p[self.fc1.w], p[self.fc1.b], p[self.fc2.w], p[self.fc2.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[channels]).with_grad()),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]).with_grad()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        layer_norm_var(tape, x, p[self.gain], p[self.bias], LN_EPS)
    }
}
