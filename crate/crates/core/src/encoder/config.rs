use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Token width `C`.
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub template_edge: usize,
    pub search_edge: usize,
    /// Learnable tokens in the sequence prefix.
    pub prefix_len: usize,
    pub reasoning_tokens: usize,
    pub text_tokens: usize,
    /// 1-based layer indices after which token fusion runs.
    pub fusion_layers: Vec<usize>,
    pub mlp_expansion: usize,
    /// Rows of the hashed word-embedding table.
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let layers = 8;
        Self {
            channels: 64,
            layers,
            heads: 4,
            patch: 8,
            template_edge: 32,
            search_edge: 64,
            prefix_len: 2,
            reasoning_tokens: 1,
            text_tokens: 1,
            fusion_layers: default_fusion_layers(layers),
            mlp_expansion: 4,
            vocab_size: 4096,
        }
    }
}

/// `{L/4, L/2, 3L/4, L}` (deduplicated, at least layer 1).
pub fn default_fusion_layers(layers: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [layers / 4, layers / 2, 3 * layers / 4, layers]
        .into_iter()
        .map(|l| l.max(1))
        .collect();
    v.dedup();
    v
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.template_edge.is_multiple_of(self.patch) || !self.search_edge.is_multiple_of(self.patch) {
            return bad(format!(
                "template edge {} and search edge {} must be divisible by patch {}",
                self.template_edge, self.search_edge, self.patch
            ));
        }
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.layers == 0 {
            return bad("at least one layer required".into());
        }
        if self.fusion_layers.is_empty()
            || self.fusion_layers.windows(2).any(|w| w[0] >= w[1])
            || self.fusion_layers.iter().any(|&l| l == 0 || l > self.layers)
        {
            return bad(format!(
                "fusion layers {:?} must be sorted, distinct, nonempty, within 1..={}",
                self.fusion_layers, self.layers
            ));
        }
        if self.reasoning_tokens == 0 || self.text_tokens == 0 {
            return bad("reasoning and text token counts must be positive".into());
        }
        if self.vocab_size == 0 || self.mlp_expansion == 0 {
            return bad("vocab size and mlp expansion must be positive".into());
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_edge / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_edge / self.patch
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}
