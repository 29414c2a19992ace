//! Adaptive token fusion: attention-based search-token selection, cross-modal
//! channel exchange and token-dimension MLP fusion.
//!
//! Within one fusion layer the steps run in the order
//! select → relevance → exchange → fuse ([`ATF_ORDER`]).

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionRecord, Boundaries, DiscardedToken, LayerHook, TokenSequence};
use crate::error::{Error, Result};
use crate::numeric::nn::{fan_in_uniform, Mlp};
use crate::numeric::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub const ATF_ORDER: &str = "select,relevance,exchange,fuse";

/// Per-search-token attention mass, split by key segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchScores {
    pub x2r: Vec<f64>,
    pub x2h: Vec<f64>,
    pub x2z: Vec<f64>,
    pub x2x: Vec<f64>,
    pub total: Vec<f64>,
}

impl SearchScores {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Ascending indices into the pre-selection search segment.
    pub kept_indices: Vec<usize>,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExchangePlan {
    /// Ascending channel indices.
    pub channel_indices: Vec<usize>,
    pub sigma: f64,
}

impl ExchangePlan {
    pub fn mask(&self, channels: usize) -> Result<Vec<bool>> {
        let mut m = vec![false; channels];
        for &c in &self.channel_indices {
            if c >= channels {
                return Err(Error::arg(format!("exchange channel {c} out of range for {channels}")));
            }
            m[c] = true;
        }
        Ok(m)
    }
}

/// `⌈γ·n⌉`, tolerant of representation error in `γ·n`.
pub fn retained_count(gamma: f64, n: usize) -> usize {
    ((gamma * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keys of the central `⌈g/2⌉×⌈g/2⌉` block of a `g×g` template grid, as
/// offsets within the template segment.
pub fn template_center(n_z: usize) -> Result<Vec<usize>> {
    let g = (n_z as f64).sqrt().round() as usize;
    if g * g != n_z || g == 0 {
        return Err(Error::arg(format!("template segment of {n_z} tokens is not a square grid")));
    }
    let k = g.div_ceil(2);
    let start = (g - k) / 2;
    Ok((start..start + k)
        .flat_map(|r| (start..start + k).map(move |c| r * g + c))
        .collect())
}

pub fn score_search_tokens(attn: &AttentionRecord, bounds: &Boundaries) -> Result<SearchScores> {
    let n = attn.rows();
    if attn.shape() != [n, n] {
        return Err(Error::shape("score_search_tokens", attn.shape(), &[n, n]));
    }
    bounds.validate(n)?;
    let center: Vec<usize> = template_center(bounds.template().len())?
        .into_iter()
        .map(|k| bounds.template().start + k)
        .collect();
    let seg = |row: &[f64], r: Range<usize>| row[r].iter().sum::<f64>();
    let mut s = SearchScores {
        x2r: Vec::new(),
        x2h: Vec::new(),
        x2z: Vec::new(),
        x2x: Vec::new(),
        total: Vec::new(),
    };
    for q in bounds.search() {
        let row = attn.row(q);
        let (r, h, x) = (seg(row, bounds.reasoning()), seg(row, bounds.text()), seg(row, bounds.search()));
        let z: f64 = center.iter().map(|&k| row[k]).sum();
        s.x2r.push(r);
        s.x2h.push(h);
        s.x2z.push(z);
        s.x2x.push(x);
        s.total.push(r + h + z + x);
    }
    Ok(s)
}

/// Indices of the `count` largest scores in ascending index order; ties go
/// to the lower index.
pub fn select_top(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

pub fn select_tokens(scores: &[f64], gamma: f64) -> Result<SelectionResult> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::arg(format!("retention ratio {gamma} outside (0, 1]")));
    }
    Ok(SelectionResult {
        kept_indices: select_top(scores, retained_count(gamma, scores.len())),
        gamma,
    })
}

/// `S = (F_B·W_B)ᵀ (F_R·W_R)`, a `C×C` relevance matrix.
pub fn channel_relevance(f_b: &Tensor, f_r: &Tensor, w_b: &Tensor, w_r: &Tensor) -> Result<Tensor> {
    if f_b.shape() != f_r.shape() {
        return Err(Error::shape("channel_relevance", f_b.shape(), f_r.shape()));
    }
    let pb = f_b.matmul(w_b)?;
    let pr = f_r.matmul(w_r)?;
    pb.transpose().matmul(&pr)
}

/// Keeps the `round(σ·C)` channels with the largest row-mean of `S`.
pub fn plan_exchange(s: &Tensor, sigma: f64) -> Result<ExchangePlan> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::arg(format!("exchange ratio {sigma} outside [0, 1]")));
    }
    let c = s.rows();
    if s.shape() != [c, c] {
        return Err(Error::shape("plan_exchange", s.shape(), &[c, c]));
    }
    let importance: Vec<f64> = (0..c).map(|i| s.row(i).iter().sum::<f64>() / c as f64).collect();
    let count = (sigma * c as f64).round() as usize;
    Ok(ExchangePlan {
        channel_indices: select_top(&importance, count),
        sigma,
    })
}

/// Swaps the planned columns between `f_b` and `f_r`.
pub fn exchange_channels(f_b: &Tensor, f_r: &Tensor, plan: &ExchangePlan) -> Result<(Tensor, Tensor)> {
    if f_b.shape() != f_r.shape() {
        return Err(Error::shape("exchange_channels", f_b.shape(), f_r.shape()));
    }
    let c = f_b.cols();
    plan.mask(c)?;
    let (mut b, mut r) = (f_b.clone(), f_r.clone());
    for i in 0..f_b.rows() {
        for &ch in &plan.channel_indices {
            b.set(i, ch, f_r.at(i, ch));
            r.set(i, ch, f_b.at(i, ch));
        }
    }
    Ok((b, r))
}

/// Tape form of [`exchange_channels`].
pub fn exchange_channels_var(tape: &mut Tape, f_b: Var, f_r: Var, plan: &ExchangePlan) -> Result<(Var, Var)> {
    let mask = plan.mask(tape.value(f_b).cols())?;
    let b = tape.select_cols(f_b, f_r, &mask)?;
    let r = tape.select_cols(f_r, f_b, &mask)?;
    Ok((b, r))
}

/// `[F_B; F_R] + M([F_B; F_R])`, split back into the two halves.
pub fn fuse_modalities(tape: &mut Tape, p: &Bound, mlp: &Mlp, f_b: Var, f_r: Var) -> Result<(Var, Var)> {
    if tape.value(f_b).shape() != tape.value(f_r).shape() {
        return Err(Error::shape("fuse_modalities", tape.value(f_b).shape(), tape.value(f_r).shape()));
    }
    let n = tape.value(f_b).rows();
    let joint = tape.concat_rows(&[f_b, f_r])?;
    let m = mlp.forward(tape, p, joint)?;
    let fused = tape.add(joint, m)?;
    Ok((tape.slice_rows(fused, 0, n)?, tape.slice_rows(fused, n, n)?))
}

/// Parameters of one fusion layer. `W_B`/`W_R` only shape the discrete
/// exchange plan, so they are stored as frozen buffers.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub layer: usize,
    pub w_b: ParamId,
    pub w_r: ParamId,
    pub mlp: Mlp,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, layer: usize, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let name = format!("atf.layer{layer}");
        let mut frozen = |store: &mut ParamStore, suffix: &str| {
            let mut t = fan_in_uniform(&[channels, channels], channels, rng);
            t.requires_grad = false;
            store.add(format!("{name}.{suffix}"), t)
        };
        let w_b = frozen(store, "w_b");
        let w_r = frozen(store, "w_r");
        let mlp = Mlp::new(store, &format!("{name}.mlp"), channels, hidden, channels, rng);
        Self { layer, w_b, w_r, mlp }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtfEvent {
    pub layer: usize,
    pub search_before: usize,
    pub search_after: usize,
    pub exchanged: Vec<usize>,
}

/// Drops search tokens not in `kept` (indices into the live search segment),
/// freezing their current values.
pub fn apply_selection(tape: &mut Tape, seq: &mut TokenSequence, kept: &[usize]) -> Result<()> {
    let b = seq.bounds;
    let n_x = b.search().len();
    if kept.iter().any(|&k| k >= n_x) || kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg("kept indices must be ascending and inside the search segment"));
    }
    if kept.len() == n_x {
        return Ok(());
    }
    let mut keep_mask = vec![false; n_x];
    for &k in kept {
        keep_mask[k] = true;
    }
    let value = tape.value(seq.tokens);
    for (i, keep) in keep_mask.iter().enumerate() {
        if !keep {
            seq.discarded.push(DiscardedToken {
                grid_index: seq.search_index[i],
                value: value.row(b.search().start + i).to_vec(),
            });
        }
    }
    let rows: Vec<usize> = (0..b.search().start)
        .chain(kept.iter().map(|&k| b.search().start + k))
        .collect();
    seq.tokens = tape.gather_rows(seq.tokens, &rows)?;
    seq.search_index = kept.iter().map(|&k| seq.search_index[k]).collect();
    seq.bounds = b.with_search_len(kept.len());
    Ok(())
}

/// Fusion hook run after each configured encoder layer.
pub struct AtfHook<'a> {
    pub params: &'a [FusionParams],
    pub gamma: f64,
    pub sigma: f64,
    /// Search-grid size before any selection; every hook keeps at most
    /// `⌈γ·full_search⌉` tokens.
    pub full_search: usize,
    pub log: Vec<AtfEvent>,
}

impl<'a> AtfHook<'a> {
    pub fn new(params: &'a [FusionParams], gamma: f64, sigma: f64, full_search: usize) -> Self {
        Self {
            params,
            gamma,
            sigma,
            full_search,
            log: Vec::new(),
        }
    }
}

impl LayerHook for AtfHook<'_> {
    fn after_layer(
        &mut self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        rgb: &mut TokenSequence,
        tir: &mut TokenSequence,
        attn_rgb: &AttentionRecord,
        attn_tir: &AttentionRecord,
    ) -> Result<()> {
        let fp = self
            .params
            .iter()
            .find(|f| f.layer == layer)
            .ok_or_else(|| Error::Config(format!("no fusion parameters for layer {layer}")))?;
        if rgb.bounds != tir.bounds || rgb.search_index != tir.search_index {
            return Err(Error::arg("modalities disagree on sequence layout"));
        }

        let before = rgb.search_len();
        let s_rgb = score_search_tokens(attn_rgb, &rgb.bounds)?;
        let s_tir = score_search_tokens(attn_tir, &tir.bounds)?;
        let joint: Vec<f64> = s_rgb.total.iter().zip(&s_tir.total).map(|(a, b)| a + b).collect();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::arg(format!("retention ratio {} outside (0, 1]", self.gamma)));
        }
        let count = retained_count(self.gamma, self.full_search).min(before);
        let kept = select_top(&joint, count);
        apply_selection(tape, rgb, &kept)?;
        apply_selection(tape, tir, &kept)?;

        let s = channel_relevance(
            tape.value(rgb.tokens),
            tape.value(tir.tokens),
            tape.value(p[fp.w_b]),
            tape.value(p[fp.w_r]),
        )?;
        let plan = plan_exchange(&s, self.sigma)?;
        let (b, r) = exchange_channels_var(tape, rgb.tokens, tir.tokens, &plan)?;
        let (b, r) = fuse_modalities(tape, p, &fp.mlp, b, r)?;
        rgb.tokens = b;
        tir.tokens = r;

        self.log.push(AtfEvent {
            layer,
            search_before: before,
            search_after: count,
            exchanged: plan.channel_indices,
        });
        Ok(())
    }
}
