//! Unified visual-language encoder: patch and text tokenization, the
//! `[R; H; Z; X]` sequence layout, and a stack of transformer layers whose
//! parameters are shared between the RGB and TIR branches.

mod config;
mod sequence;
pub mod text;

use rand::Rng;

pub use config::{default_fusion_layers, EncoderConfig};
pub use sequence::{build_sequence, hole_fill, Boundaries, DiscardedToken, Modality, TokenSequence};
pub use text::{encode_text, tokenize, TextEncoder, PREFIX_HEAD, PREFIX_TAIL};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numeric::nn::{LayerNorm, Linear, Mlp};
use crate::numeric::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Per-layer parameters of one encoder block.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub qkv: Linear,
    pub out: Linear,
    /// Residual branch scales, one element each.
    pub delta1: ParamId,
    pub delta2: ParamId,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub patch: Linear,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub text: TextEncoder,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let patch_dim = 3 * cfg.patch * cfg.patch;
        let patch = Linear::new(store, "enc.patch", patch_dim, c, rng);
        let pos_template = store.add(
            "enc.pos_template",
            Tensor::uniform(&[cfg.template_tokens(), c], 0.02, rng).with_grad(),
        );
        let pos_search = store.add(
            "enc.pos_search",
            Tensor::uniform(&[cfg.search_tokens(), c], 0.02, rng).with_grad(),
        );
        let text = TextEncoder::new(cfg, store, rng);
        let layers = (1..=cfg.layers)
            .map(|l| {
                let n = format!("enc.layer{l}");
                LayerParams {
                    qkv: Linear::new(store, &format!("{n}.qkv"), c, 3 * c, rng),
                    out: Linear::new(store, &format!("{n}.out"), c, c, rng),
                    delta1: store.add(format!("{n}.delta1"), Tensor::scalar(1.0).with_grad()),
                    delta2: store.add(format!("{n}.delta2"), Tensor::scalar(1.0).with_grad()),
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), c),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), c),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), c, cfg.mlp_expansion * c, c, rng),
                }
            })
            .collect();
        Ok(Self {
            patch,
            pos_template,
            pos_search,
            text,
            layers,
        })
    }
}

/// Non-overlapping `patch×patch` blocks, row-major over the patch grid, each
/// flattened channel-major into a row of `3·patch²` values.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    let e = image.edge();
    if patch == 0 || !e.is_multiple_of(patch) {
        return Err(Error::Config(format!("image edge {e} not divisible by patch {patch}")));
    }
    let g = e / patch;
    let dim = 3 * patch * patch;
    let mut data = Vec::with_capacity(g * g * dim);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        data.push(image.get(c, gy * patch + dy, gx * patch + dx));
                    }
                }
            }
        }
    }
    Tensor::new(vec![g * g, dim], data)
}

/// Linear patch projection plus learned 2-D position embedding.
pub fn patch_embed(
    tape: &mut Tape,
    p: &Bound,
    proj: &Linear,
    pos: ParamId,
    image: &Image,
    patch: usize,
) -> Result<Var> {
    let patches = tape.constant(patchify(image, patch)?);
    let tokens = proj.forward(tape, p, patches)?;
    if tape.value(tokens).shape() != tape.value(p[pos]).shape() {
        return Err(Error::shape("patch_embed", tape.value(tokens).shape(), tape.value(p[pos]).shape()));
    }
    tape.add(tokens, p[pos])
}

/// Attention weights of one layer, averaged over heads (`N×N`, rows on the
/// simplex).
pub type AttentionRecord = Tensor;

/// One block: `F̂ = MHSA(F)`, `F̃ = F + LN(δ1·F̂)`, `F' = F̃ + LN(δ2·MLP(F̃))`.
pub fn encoder_layer(
    tape: &mut Tape,
    p: &Bound,
    layer: &LayerParams,
    heads: usize,
    seq: &TokenSequence,
) -> Result<(TokenSequence, AttentionRecord)> {
    let x = seq.tokens;
    let (n, c) = (tape.value(x).rows(), tape.value(x).cols());
    seq.bounds.validate(n)?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let qkv = layer.qkv.forward(tape, p, x)?;
    let mut head_outs = Vec::with_capacity(heads);
    let mut mean_attn = vec![0.0; n * n];
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * d, d)?;
        let k = tape.slice_cols(qkv, c + h * d, d)?;
        let v = tape.slice_cols(qkv, 2 * c + h * d, d)?;
        let scores = tape.matmul_bt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        for (m, a) in mean_attn.iter_mut().zip(tape.value(attn).data()) {
            *m += a / heads as f64;
        }
        head_outs.push(tape.matmul(attn, v)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let f_hat = layer.out.forward(tape, p, merged)?;

    let scaled = tape.mul_scalar(f_hat, p[layer.delta1])?;
    let normed = layer.ln1.forward(tape, p, scaled)?;
    let f_tilde = tape.add(x, normed)?;

    let m = layer.mlp.forward(tape, p, f_tilde)?;
    let scaled = tape.mul_scalar(m, p[layer.delta2])?;
    let normed = layer.ln2.forward(tape, p, scaled)?;
    let out = tape.add(f_tilde, normed)?;

    let next = TokenSequence {
        tokens: out,
        ..seq.clone()
    };
    Ok((next, Tensor::new(vec![n, n], mean_attn)?))
}

/// Called by [`forward_encoder`] after every layer listed in
/// `EncoderConfig::fusion_layers`.
pub trait LayerHook {
    #[allow(clippy::too_many_arguments)]
    fn after_layer(
        &mut self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        rgb: &mut TokenSequence,
        tir: &mut TokenSequence,
        attn_rgb: &AttentionRecord,
        attn_tir: &AttentionRecord,
    ) -> Result<()>;
}

/// Hook that does nothing; both branches then run fully independently.
pub struct NoHook;

impl LayerHook for NoHook {
    fn after_layer(
        &mut self,
        _: &mut Tape,
        _: &Bound,
        _: usize,
        _: &mut TokenSequence,
        _: &mut TokenSequence,
        _: &AttentionRecord,
        _: &AttentionRecord,
    ) -> Result<()> {
        Ok(())
    }
}

/// Per-modality encoder input.
pub struct EncoderInput<'a> {
    pub template: &'a Image,
    pub search: &'a Image,
    /// Encoded description `Ĥ` (`N_h×C`).
    pub text: Var,
    /// Reasoning token(s) `R` (`N_r×C`).
    pub reasoning: Var,
}

pub struct EncoderOutput {
    pub rgb: TokenSequence,
    pub tir: TokenSequence,
    /// `[rgb, tir]` head-averaged attention per layer, index `l-1`.
    pub attention: Vec<[AttentionRecord; 2]>,
}

pub fn embed_inputs(
    tape: &mut Tape,
    p: &Bound,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    modality: Modality,
    input: &EncoderInput<'_>,
) -> Result<TokenSequence> {
    if input.template.edge() != cfg.template_edge || input.search.edge() != cfg.search_edge {
        return Err(Error::Config(format!(
            "expected template/search edges {}/{}, got {}/{}",
            cfg.template_edge,
            cfg.search_edge,
            input.template.edge(),
            input.search.edge()
        )));
    }
    let z = patch_embed(tape, p, &enc.patch, enc.pos_template, input.template, cfg.patch)?;
    let x = patch_embed(tape, p, &enc.patch, enc.pos_search, input.search, cfg.patch)?;
    build_sequence(tape, modality, input.reasoning, input.text, z, x)
}

/// Runs both modalities through the shared layer stack, invoking `hook` after
/// each fusion layer.
pub fn forward_encoder(
    tape: &mut Tape,
    p: &Bound,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    rgb: &EncoderInput<'_>,
    tir: &EncoderInput<'_>,
    hook: &mut dyn LayerHook,
) -> Result<EncoderOutput> {
    let mut seq_rgb = embed_inputs(tape, p, enc, cfg, Modality::Rgb, rgb)?;
    let mut seq_tir = embed_inputs(tape, p, enc, cfg, Modality::Tir, tir)?;
    let mut attention = Vec::with_capacity(enc.layers.len());
    for (i, layer) in enc.layers.iter().enumerate() {
        let l = i + 1;
        let (next_rgb, attn_rgb) = encoder_layer(tape, p, layer, cfg.heads, &seq_rgb)?;
        let (next_tir, attn_tir) = encoder_layer(tape, p, layer, cfg.heads, &seq_tir)?;
        seq_rgb = next_rgb;
        seq_tir = next_tir;
        if cfg.fusion_layers.contains(&l) {
            hook.after_layer(tape, p, l, &mut seq_rgb, &mut seq_tir, &attn_rgb, &attn_tir)?;
        }
        attention.push([attn_rgb, attn_tir]);
    }
    Ok(EncoderOutput {
        rgb: seq_rgb,
        tir: seq_tir,
        attention,
    })
}

#[cfg(test)]
mod tests;
