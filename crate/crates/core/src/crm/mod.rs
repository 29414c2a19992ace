//! Context-aware reasoning: a bounded knowledge base of text features,
//! retrieval-guided search refinement, reasoning-token propagation, the
//! temporal gate, and the description provider interface.

mod kb;
mod provider;

use rand::Rng;

pub use kb::{kb_retrieve, InsertOutcome, KbEntry, KnowledgeBase, RetrievalResult};
#[cfg(feature = "http-provider")]
pub use provider::HttpProvider;
pub use provider::{
    attribute_sentence, fill_prompt, generate_description, truncate_words, DescriptionOutcome, DescriptionProvider, FrameAttributes,
    FrameRef, MockProvider, ProviderRequest, ProviderResponse, MAX_DESCRIPTION_WORDS, PROMPT_TEMPLATE,
};

use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::numeric::nn::{fan_in_uniform, Linear, Mlp};
use crate::numeric::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Single-head cross-attention `Φ(Q, KV) = softmax(Q·Wq (KV·Wk)ᵀ / √C) KV·Wv · Wo`.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        let mut w = |s: &str| store.add(format!("{name}.{s}"), fan_in_uniform(&[c, c], c, rng));
        Self {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, queries: Var, kv: Var) -> Result<Var> {
        let c = tape.value(queries).cols();
        if tape.value(kv).cols() != c {
            return Err(Error::shape("cross_attention", tape.value(queries).shape(), tape.value(kv).shape()));
        }
        let q = tape.matmul(queries, p[self.wq])?;
        let k = tape.matmul(kv, p[self.wk])?;
        let v = tape.matmul(kv, p[self.wv])?;
        let s = tape.matmul_bt(q, k)?;
        let s = tape.scale(s, 1.0 / (c as f64).sqrt());
        let a = tape.softmax_rows(s);
        let o = tape.matmul(a, v)?;
        tape.matmul(o, p[self.wo])
    }
}

/// Parameters shared by both modalities, plus a text projection per modality.
#[derive(Clone, Debug)]
pub struct CrmParams {
    /// `P_m`: text feature → knowledge-base feature, index by [`modality_slot`].
    pub text_proj: [Linear; 2],
    pub refine: CrossAttention,
    /// `G`: `3C → N_r·C`.
    pub guidance: Mlp,
    pub temporal_attn: CrossAttention,
    pub temporal_mlp: Mlp,
    /// Learned initial reasoning token `R⁰`.
    pub r0: ParamId,
}

pub fn modality_slot(m: Modality) -> usize {
    match m {
        Modality::Rgb => 0,
        Modality::Tir => 1,
    }
}

impl CrmParams {
    pub fn new(store: &mut ParamStore, c: usize, n_r: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let text_proj = [
            Linear::new(store, "crm.text_proj.rgb", c, c, rng),
            Linear::new(store, "crm.text_proj.tir", c, c, rng),
        ];
        let refine = CrossAttention::new(store, "crm.refine", c, rng);
        let guidance = Mlp::new(store, "crm.guidance", 3 * c, hidden, n_r * c, rng);
        let temporal_attn = CrossAttention::new(store, "crm.temporal_attn", c, rng);
        let temporal_mlp = Mlp::new(store, "crm.temporal_mlp", c, hidden, c, rng);
        let r0 = store.add("crm.r0", Tensor::uniform(&[n_r, c], 0.02, rng).with_grad());
        Self {
            text_proj,
            refine,
            guidance,
            temporal_attn,
            temporal_mlp,
            r0,
        }
    }
}

/// Knowledge-base feature of one modality: mean over text tokens, projected
/// by `P_m`. Returns a `1×C` var.
pub fn text_feature(tape: &mut Tape, p: &Bound, crm: &CrmParams, m: Modality, text: Var) -> Result<Var> {
    let pooled = tape.mean_rows(text)?;
    crm.text_proj[modality_slot(m)].forward(tape, p, pooled)
}

/// `X̄ = X̂ + Φ(X̂, V)`; identity when `retrieved` is `None`.
pub fn refine_search(
    tape: &mut Tape,
    p: &Bound,
    attn: &CrossAttention,
    x_hat: Var,
    retrieved: Option<Var>,
) -> Result<Var> {
    let Some(v) = retrieved else {
        return Ok(x_hat);
    };
    if tape.value(v).rows() == 0 {
        return Ok(x_hat);
    }
    let phi = attn.forward(tape, p, x_hat, v)?;
    tape.add(x_hat, phi)
}

/// `R^{t+1} = G([mean R, mean Ĥ, mean Ẑ])`, reshaped to `N_r×C`.
pub fn propagate_reasoning(tape: &mut Tape, p: &Bound, g: &Mlp, r: Var, h: Var, z: Var) -> Result<Var> {
    let (n_r, c) = (tape.value(r).rows(), tape.value(r).cols());
    for v in [h, z] {
        if tape.value(v).cols() != c {
            return Err(Error::shape("propagate_reasoning", tape.value(r).shape(), tape.value(v).shape()));
        }
    }
    let pooled = [tape.mean_rows(r)?, tape.mean_rows(h)?, tape.mean_rows(z)?];
    let joint = tape.concat_cols(&pooled)?;
    let out = g.forward(tape, p, joint)?;
    tape.reshape(out, &[n_r, c])
}

/// Per-token gate `sigmoid(mean_j (X̄·R̃ᵀ)_ij / √C)` applied to `X̄`.
/// Returns the gated tokens and the gate values.
pub fn gate_tokens(tape: &mut Tape, x_bar: Var, r_tilde: Var) -> Result<(Var, Var)> {
    let (n_r, c) = (tape.value(r_tilde).rows(), tape.value(r_tilde).cols());
    let scores = tape.matmul_bt(x_bar, r_tilde)?;
    let avg = tape.constant(Tensor::full(&[n_r, 1], 1.0 / (n_r as f64 * (c as f64).sqrt())));
    let pre = tape.matmul(scores, avg)?;
    let gate = tape.sigmoid(pre);
    Ok((tape.mul_col(x_bar, gate)?, gate))
}

pub struct TemporalOutput {
    pub r_tilde: Var,
    pub x_tilde: Var,
    pub gate: Var,
}

/// `R̂ = R + Φ(R, X̄)`, `R̃ = R̂ + MLP(R̂)`, then the per-token gate on `X̄`.
pub fn temporal_augment(tape: &mut Tape, p: &Bound, crm: &CrmParams, r_next: Var, x_bar: Var) -> Result<TemporalOutput> {
    let phi = crm.temporal_attn.forward(tape, p, r_next, x_bar)?;
    let r_hat = tape.add(r_next, phi)?;
    let m = crm.temporal_mlp.forward(tape, p, r_hat)?;
    let r_tilde = tape.add(r_hat, m)?;
    let (x_tilde, gate) = gate_tokens(tape, x_bar, r_tilde)?;
    Ok(TemporalOutput { r_tilde, x_tilde, gate })
}

/// Reasoning token carried between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningState {
    pub token: Tensor,
}

impl ReasoningState {
    pub fn new(token: Tensor) -> Result<Self> {
        if token.shape().len() != 2 || !token.is_finite() {
            return Err(Error::arg("reasoning token must be a finite N_r×C matrix"));
        }
        Ok(Self { token })
    }
}
