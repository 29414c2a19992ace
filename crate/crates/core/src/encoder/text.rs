//! Hashed bag-of-words text encoder with a partly learnable sequence prefix.
//!
//! Words are lowercased, split on non-alphanumerics and hashed (FNV-1a)
//! into a learned embedding table. The fixed prefix words, the description
//! words and the learnable prefix tokens are mean-pooled and projected to
//! `N_h×C`. Word rows are gathered in sorted index order so the pooled sum
//! is independent of word order down to the last bit.

use rand::Rng;

use super::EncoderConfig;
use crate::error::Result;
use crate::numeric::nn::Linear;
use crate::numeric::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Fixed words preceding the learnable prefix tokens.
pub const PREFIX_HEAD: &str = "A sequence of a";
/// Fixed words following the learnable prefix tokens.
pub const PREFIX_TAIL: &str = "object:";

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    /// Learnable prefix tokens, `prefix_len×C`.
    pub prefix: ParamId,
    pub proj: Linear,
    pub vocab_size: usize,
    pub text_tokens: usize,
}

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let table = store.add(
            "enc.text.table",
            Tensor::uniform(&[cfg.vocab_size, c], 1.0, rng).with_grad(),
        );
        let prefix = store.add(
            "enc.text.prefix",
            Tensor::uniform(&[cfg.prefix_len, c], 1.0, rng).with_grad(),
        );
        let proj = Linear::new(store, "enc.text.proj", c, cfg.text_tokens * c, rng);
        Self {
            table,
            prefix,
            proj,
            vocab_size: cfg.vocab_size,
            text_tokens: cfg.text_tokens,
        }
    }

    /// Sorted table rows for the prefix words plus `description`.
    pub fn word_rows(&self, description: &str) -> Vec<usize> {
        let mut rows: Vec<usize> = tokenize(PREFIX_HEAD)
            .into_iter()
            .chain(tokenize(description))
            .chain(tokenize(PREFIX_TAIL))
            .map(|w| (fnv1a(w.as_bytes()) % self.vocab_size as u64) as usize)
            .collect();
        rows.sort_unstable();
        rows
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|ch: char| !ch.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Encodes a description into `N_h×C` text tokens.
pub fn encode_text(tape: &mut Tape, p: &Bound, enc: &TextEncoder, description: &str) -> Result<Var> {
    let rows = enc.word_rows(description);
    let words = tape.gather_rows(p[enc.table], &rows)?;
    let all = tape.concat_rows(&[p[enc.prefix], words])?;
    let pooled = tape.mean_rows(all)?;
    let projected = enc.proj.forward(tape, p, pooled)?;
    let c = tape.value(pooled).cols();
    tape.reshape(projected, &[enc.text_tokens, c])
}
