use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Tir];
}

/// Segment offsets of a `[R; H; Z; X]` sequence:
/// `reasoning = o[0]..o[1]`, `text = o[1]..o[2]`, `template = o[2]..o[3]`,
/// `search = o[3]..o[4]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Boundaries(pub [usize; 5]);

impl Boundaries {
    pub fn from_lengths(reasoning: usize, text: usize, template: usize, search: usize) -> Self {
        let a = reasoning;
        let b = a + text;
        let c = b + template;
        Self([0, a, b, c, c + search])
    }

    pub fn reasoning(&self) -> Range<usize> {
        self.0[0]..self.0[1]
    }
    pub fn text(&self) -> Range<usize> {
        self.0[1]..self.0[2]
    }
    pub fn template(&self) -> Range<usize> {
        self.0[2]..self.0[3]
    }
    pub fn search(&self) -> Range<usize> {
        self.0[3]..self.0[4]
    }
    pub fn total(&self) -> usize {
        self.0[4]
    }

    pub fn with_search_len(&self, n: usize) -> Self {
        let mut o = self.0;
        o[4] = o[3] + n;
        Self(o)
    }

    /// Monotone, starting at zero, covering `total` tokens.
    pub fn validate(&self, total: usize) -> Result<()> {
        if self.0[0] != 0 || self.0.windows(2).any(|w| w[0] > w[1]) || self.0[4] != total {
            return Err(Error::arg(format!("malformed boundaries {:?} for {total} tokens", self.0)));
        }
        Ok(())
    }
}

/// Search token removed by token selection, frozen at removal time.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscardedToken {
    /// Position in the full search patch grid.
    pub grid_index: usize,
    pub value: Vec<f64>,
}

/// Unified token sequence of one modality on a tape.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub bounds: Boundaries,
    pub modality: Modality,
    /// Grid position of each live search token, ascending.
    pub search_index: Vec<usize>,
    pub discarded: Vec<DiscardedToken>,
}

impl TokenSequence {
    pub fn segment(&self, tape: &mut Tape, range: Range<usize>) -> Result<Var> {
        tape.slice_rows(self.tokens, range.start, range.len())
    }

    pub fn search_len(&self) -> usize {
        self.bounds.search().len()
    }
}

/// Concatenates `[R; H; Z; X]` into one sequence and records the offsets.
pub fn build_sequence(
    tape: &mut Tape,
    modality: Modality,
    reasoning: Var,
    text: Var,
    template: Var,
    search: Var,
) -> Result<TokenSequence> {
    let parts = [reasoning, text, template, search];
    let c = tape.value(reasoning).cols();
    for &p in &parts {
        if tape.value(p).cols() != c {
            return Err(Error::shape("build_sequence", tape.value(reasoning).shape(), tape.value(p).shape()));
        }
    }
    let n_x = tape.value(search).rows();
    if n_x == 0 {
        return Err(Error::EmptyInput("build_sequence: search segment"));
    }
    let bounds = Boundaries::from_lengths(
        tape.value(reasoning).rows(),
        tape.value(text).rows(),
        tape.value(template).rows(),
        n_x,
    );
    let tokens = tape.concat_rows(&parts)?;
    Ok(TokenSequence {
        tokens,
        bounds,
        modality,
        search_index: (0..n_x).collect(),
        discarded: Vec::new(),
    })
}

/// Dense search grid: live tokens at their grid positions, frozen values in
/// the holes.
pub fn hole_fill(seq: &TokenSequence, grid_tokens: usize, channels: usize) -> Tensor {
    let mut fill = Tensor::zeros(&[grid_tokens, channels]);
    for d in &seq.discarded {
        fill.row_mut(d.grid_index).copy_from_slice(&d.value);
    }
    fill
}
