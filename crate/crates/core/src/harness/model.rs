//! Full tracker network: encoder, fusion layers, reasoning module and head,
//! plus the per-frame forward pass shared by training and tracking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrackerConfig;
use crate::crm::{
    kb_retrieve, propagate_reasoning, refine_search, temporal_augment, text_feature, CrmParams, KnowledgeBase,
};
use crate::encoder::{encode_text, forward_encoder, EncoderInput, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::fusion::{AtfEvent, AtfHook, FusionParams};
use crate::head::{head_forward, BBox, BnMode, BnStats, HeadParams};
use crate::imaging::{CropWindow, Image};
use crate::numeric::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub enc: EncoderParams,
    pub fusion: Vec<FusionParams>,
    pub crm: CrmParams,
    pub head: HeadParams,
}

impl Model {
    pub fn new(cfg: &TrackerConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let c = e.channels;
        let hidden = cfg.mlp_ratio * c;
        let enc = EncoderParams::new(e, store, rng)?;
        let fusion = e
            .fusion_layers
            .iter()
            .map(|&l| FusionParams::new(store, l, c, hidden, rng))
            .collect();
        let crm = CrmParams::new(store, c, e.reasoning_tokens, hidden, rng);
        let head = HeadParams::new(store, c, rng);
        Ok(Self { enc, fusion, crm, head })
    }

    /// Freshly initialized parameters seeded from `cfg.seed`.
    pub fn init(cfg: &TrackerConfig) -> Result<(ParamStore, Self)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Self::new(cfg, &mut store, &mut rng)?;
        Ok((store, model))
    }
}

/// Knowledge base whose entries also live on a tape, kept in step with the
/// value-level base.
pub struct TapeKb {
    pub kb: KnowledgeBase,
    pub vars: Vec<Var>,
}

impl TapeKb {
    pub fn new(capacity: usize, lambda: f64) -> Result<Self> {
        Ok(Self {
            kb: KnowledgeBase::new(capacity, lambda)?,
            vars: Vec::new(),
        })
    }

    /// Mirrors a stored base as tape constants.
    pub fn from_kb(tape: &mut Tape, kb: &KnowledgeBase) -> Result<Self> {
        let vars = kb
            .entries()
            .map(|e| Tensor::new(vec![1, e.vector.len()], e.vector.clone()).map(|t| tape.constant(t)))
            .collect::<Result<_>>()?;
        Ok(Self { kb: kb.clone(), vars })
    }

    pub fn insert(&mut self, tape: &Tape, feature: Var, frame: usize) -> Result<bool> {
        let out = self.kb.insert(tape.value(feature).data(), frame)?;
        if out.inserted {
            if out.evicted.is_some() {
                self.vars.remove(0);
            }
            self.vars.push(feature);
        }
        Ok(out.inserted)
    }

    /// Top-`k` entries for `query` stacked into a `k×C` var, if any.
    pub fn retrieve(&self, tape: &mut Tape, query: Var, k: usize) -> Result<Option<Var>> {
        let r = kb_retrieve(&self.kb, tape.value(query).data(), k)?;
        if r.is_empty() {
            return Ok(None);
        }
        let parts: Vec<Var> = r.positions.iter().map(|&i| self.vars[i]).collect();
        Ok(Some(tape.concat_rows(&parts)?))
    }
}

/// Knowledge-base feature of `description` for modality `m`.
pub fn description_feature(tape: &mut Tape, p: &Bound, model: &Model, m: Modality, description: &str) -> Result<Var> {
    let h = encode_text(tape, p, &model.enc.text, description)?;
    text_feature(tape, p, &model.crm, m, h)
}

pub struct FrameInput<'a> {
    /// `[rgb, tir]` template crops.
    pub template: [&'a Image; 2],
    /// `[rgb, tir]` search crops.
    pub search: [&'a Image; 2],
    pub description: &'a str,
}

pub struct FrameOutput {
    /// Head output `[g²×5]`.
    pub out: Var,
    /// Reasoning tokens for the next frame, `[rgb, tir]`.
    pub next_reasoning: [Var; 2],
    pub tokens_kept: usize,
    pub atf: Vec<AtfEvent>,
    pub bn_stats: Vec<BnStats>,
}

/// One frame through encoder, fusion, reasoning module and head.
#[allow(clippy::too_many_arguments)]
pub fn forward_frame(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    cfg: &TrackerConfig,
    input: &FrameInput<'_>,
    reasoning: [Var; 2],
    kbs: [&TapeKb; 2],
    mode: BnMode,
) -> Result<FrameOutput> {
    let ec = &cfg.encoder;
    let text = encode_text(tape, p, &model.enc.text, input.description)?;
    let rgb = EncoderInput {
        template: input.template[0],
        search: input.search[0],
        text,
        reasoning: reasoning[0],
    };
    let tir = EncoderInput {
        template: input.template[1],
        search: input.search[1],
        text,
        reasoning: reasoning[1],
    };
    let mut hook = AtfHook::new(&model.fusion, cfg.gamma, cfg.sigma, ec.search_tokens());
    let enc = forward_encoder(tape, p, &model.enc, ec, &rgb, &tir, &mut hook)?;

    let mut x_tilde = Vec::with_capacity(2);
    let mut next = Vec::with_capacity(2);
    for (slot, seq) in [&enc.rgb, &enc.tir].into_iter().enumerate() {
        let b = seq.bounds;
        let r = seq.segment(tape, b.reasoning())?;
        let h = seq.segment(tape, b.text())?;
        let z = seq.segment(tape, b.template())?;
        let x = seq.segment(tape, b.search())?;
        let query = text_feature(tape, p, &model.crm, seq.modality, text)?;
        let v = kbs[slot].retrieve(tape, query, cfg.retrieve_k)?;
        let x_bar = refine_search(tape, p, &model.crm.refine, x, v)?;
        let r_next = propagate_reasoning(tape, p, &model.crm.guidance, r, h, z)?;
        let aug = temporal_augment(tape, p, &model.crm, r_next, x_bar)?;
        x_tilde.push(aug.x_tilde);
        next.push(r_next);
    }
    let grid = ec.search_edge / ec.patch;
    let head = head_forward(tape, p, &model.head, x_tilde[0], &enc.rgb, x_tilde[1], &enc.tir, grid, mode)?;
    Ok(FrameOutput {
        out: head.out,
        next_reasoning: [next[0], next[1]],
        tokens_kept: enc.rgb.search_len(),
        atf: hook.log,
        bn_stats: head.stats,
    })
}

/// Square window of side `factor·sqrt(w·h)` around the box center, shifted
/// into the frame.
pub fn crop_window(bbox: &[f64; 4], factor: f64, frame: usize) -> Result<CropWindow> {
    if !(bbox[2] > 0.0 && bbox[3] > 0.0) {
        return Err(Error::DegenerateBox(*bbox));
    }
    let side = factor * (bbox[2] * bbox[3]).sqrt();
    Ok(CropWindow::centered_clamped(
        bbox[0] + bbox[2] / 2.0,
        bbox[1] + bbox[3] / 2.0,
        side,
        frame,
    ))
}

/// Ground-truth `bbox` (frame pixels, top-left) inside a crop of `window`
/// rotated by `angle`, in head grid units. The center is clamped into the
/// grid.
pub fn target_in_crop(bbox: &[f64; 4], window: &CropWindow, angle: f64, cfg: &TrackerConfig) -> BBox {
    let e = cfg.encoder.search_edge;
    let (cx, cy) = (bbox[0] + bbox[2] / 2.0, bbox[1] + bbox[3] / 2.0);
    let (wc, hc) = window.center();
    // inverse of the crop's rotation about the window center
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (cx - wc, cy - hc);
    let (rx, ry) = (c * dx + s * dy, -s * dx + c * dy);
    let (px, py) = window.to_crop(wc + rx, hc + ry, e);
    let scale = e as f64 / window.side;
    let grid = (e / cfg.encoder.patch) as f64;
    let inside = |v: f64| v.clamp(0.0, grid - 1e-6);
    let b = BBox::from_pixels([px, py, bbox[2] * scale, bbox[3] * scale], cfg.encoder.patch, e);
    BBox {
        x: inside(b.x),
        y: inside(b.y),
        ..b
    }
}

/// Decoded head box mapped back to frame pixels (top-left format).
pub fn box_to_frame(b: &BBox, window: &CropWindow, cfg: &TrackerConfig) -> [f64; 4] {
    let e = cfg.encoder.search_edge;
    let [cx, cy, w, h] = b.to_pixels(cfg.encoder.patch, e);
    let (fx, fy) = window.to_frame(cx, cy, e);
    let s = window.side / e as f64;
    let (w, h) = (w * s, h * s);
    [fx - w / 2.0, fy - h / 2.0, w, h]
}
