//! Frame-by-frame tracking over a sequence.

use super::config::TrackerConfig;
use super::model::{box_to_frame, crop_window, description_feature, forward_frame, FrameInput, Model, TapeKb};
use super::runlog::{FrameRecord, RunHeader, RunLog};
use super::synth::SequenceRecord;
use super::train::template_crops;
use crate::crm::{generate_description, DescriptionProvider, FrameRef, KnowledgeBase};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::fusion::ATF_ORDER;
use crate::head::{decode_bbox, BnMode, PredictionMaps};
use crate::imaging::Image;
use crate::numeric::{ParamStore, Tape, Tensor};

/// How search tokens are gated by the reasoning tokens.
pub const GATE_NOTE: &str = "sigmoid(mean over reasoning tokens of X R^T / sqrt(C))";

/// Integer `[x, y, w, h]` inside a frame of edge `e`, at least one pixel.
pub fn integer_box(b: &[f64; 4], e: usize) -> [i64; 4] {
    let e = e as i64;
    let x = (b[0].floor() as i64).clamp(0, e - 1);
    let y = (b[1].floor() as i64).clamp(0, e - 1);
    let w = (b[2].round() as i64).clamp(1, e - x);
    let h = (b[3].round() as i64).clamp(1, e - y);
    [x, y, w, h]
}

/// Shrinks and shifts `b` into the frame, keeping at least one pixel.
pub fn clamp_box(b: [f64; 4], e: usize) -> [f64; 4] {
    let e = e as f64;
    let w = b[2].clamp(1.0, e);
    let h = b[3].clamp(1.0, e);
    [b[0].clamp(0.0, e - w), b[1].clamp(0.0, e - h), w, h]
}

struct State {
    templates: [Image; 2],
    description: String,
    kbs: [KnowledgeBase; 2],
    reasoning: [Tensor; 2],
    last_update: usize,
}

/// Tracks the target of `seq` from its frame-0 box. Step `t` reads only
/// frame `t`; ground truth is used for frame 0 and for scoring.
pub fn run_tracker(
    seq: &SequenceRecord,
    store: &ParamStore,
    model: &Model,
    cfg: &TrackerConfig,
    provider: &dyn DescriptionProvider,
) -> Result<RunLog> {
    seq.validate()?;
    cfg.validate()?;
    let edge = seq.edge();
    let frame_ref = |t: usize| FrameRef {
        image: &seq.rgb[t],
        frame_index: t,
        attributes: seq.attributes.get(t),
    };
    let features = |desc: &str| -> Result<[Vec<f64>; 2]> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut out = [Vec::new(), Vec::new()];
        for (slot, m) in [Modality::Rgb, Modality::Tir].into_iter().enumerate() {
            let v = description_feature(&mut tape, &p, model, m, desc)?;
            out[slot] = tape.value(v).data().to_vec();
        }
        Ok(out)
    };

    let init = seq.gt_boxes[0];
    let first = generate_description(provider, &frame_ref(0), integer_box(&init, edge), &seq.descriptions[0])?;
    let r0 = store.get(model.crm.r0).clone();
    let mut st = State {
        templates: template_crops(seq, 0, &init, cfg)?,
        description: first.description,
        kbs: [
            KnowledgeBase::new(cfg.kb_capacity, cfg.lambda)?,
            KnowledgeBase::new(cfg.kb_capacity, cfg.lambda)?,
        ],
        reasoning: [r0.clone(), r0],
        last_update: 0,
    };
    let f0 = features(&st.description)?;
    for (kb, f) in st.kbs.iter_mut().zip(&f0) {
        kb.insert(f, 0)?;
    }

    let alt = |t: usize| seq.gt_boxes_alt.as_ref().map(|a| a[t]);
    let mut rec = FrameRecord::new(0, init, seq.gt_boxes[0], alt(0))?;
    rec.kb_size = [st.kbs[0].len(), st.kbs[1].len()];
    rec.description_used = st.description.clone();
    let mut frames = vec![rec];
    let mut prev = init;
    let grid = cfg.encoder.search_edge / cfg.encoder.patch;

    for t in 1..seq.len() {
        let window = crop_window(&prev, cfg.search_factor, edge)?;
        let e = cfg.encoder.search_edge;
        let search = [seq.rgb[t].crop(&window, e, 0.0), seq.tir[t].crop(&window, e, 0.0)];

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let kbs = [TapeKb::from_kb(&mut tape, &st.kbs[0])?, TapeKb::from_kb(&mut tape, &st.kbs[1])?];
        let reasoning = [
            tape.constant(st.reasoning[0].clone()),
            tape.constant(st.reasoning[1].clone()),
        ];
        let input = FrameInput {
            template: [&st.templates[0], &st.templates[1]],
            search: [&search[0], &search[1]],
            description: &st.description,
        };
        let out = forward_frame(&mut tape, &p, model, cfg, &input, reasoning, [&kbs[0], &kbs[1]], BnMode::Frozen)?;
        let maps = PredictionMaps::from_output(tape.value(out.out), grid)?;
        st.reasoning = [
            tape.value(out.next_reasoning[0]).clone(),
            tape.value(out.next_reasoning[1]).clone(),
        ];
        drop(tape);

        let score = maps.max_score();
        let pred = clamp_box(box_to_frame(&decode_bbox(&maps), &window, cfg), edge);
        if !pred.iter().all(|v| v.is_finite()) {
            return Err(Error::arg(format!("non-finite prediction at frame {t}")));
        }
        let mut rec = FrameRecord::new(t, pred, seq.gt_boxes[t], alt(t))?;
        rec.tokens_kept = Some(out.tokens_kept);
        rec.max_score = Some(score);
        rec.description_used = st.description.clone();

        if score >= cfg.update_threshold && t - st.last_update >= cfg.update_interval {
            st.templates = template_crops(seq, t, &pred, cfg)?;
            let d = generate_description(provider, &frame_ref(t), integer_box(&pred, edge), &st.description)?;
            st.description = d.description;
            let f = features(&st.description)?;
            for (kb, f) in st.kbs.iter_mut().zip(&f) {
                kb.insert(f, t)?;
            }
            st.last_update = t;
            rec.updated = true;
        }
        rec.kb_size = [st.kbs[0].len(), st.kbs[1].len()];
        frames.push(rec);
        prev = pred;
    }

    let header = RunHeader {
        sequence_seed: seq.seed,
        config_seed: cfg.seed,
        frames: seq.len(),
        atf_order: ATF_ORDER.into(),
        gate: GATE_NOTE.into(),
        pr_threshold: cfg.pr_threshold,
        npr_threshold: cfg.npr_threshold,
    };
    RunLog::from_frames(header, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crm::MockProvider;
    use crate::harness::synth::{gen_sequence, SequenceSpec};

    fn tiny() -> (TrackerConfig, SequenceRecord) {
        let mut cfg = TrackerConfig::default();
        cfg.encoder.channels = 16;
        cfg.encoder.layers = 2;
        cfg.encoder.heads = 2;
        cfg.encoder.fusion_layers = vec![1, 2];
        cfg.encoder.vocab_size = 64;
        let seq = gen_sequence(&SequenceSpec {
            length: 8,
            edge: 64,
            target_size: 12.0,
            ..SequenceSpec::default()
        })
        .unwrap();
        (cfg, seq)
    }

    #[test]
    fn box_helpers() {
        assert_eq!(integer_box(&[-3.0, 10.6, 4.4, 100.0], 32), [0, 10, 4, 22]);
        assert_eq!(clamp_box([30.0, -2.0, 4.0, 0.2], 32), [28.0, 0.0, 4.0, 1.0]);
    }

    #[test]
    fn frame_zero_is_init_box_and_kb_bounded() {
        let (cfg, seq) = tiny();
        let (store, model) = Model::init(&cfg).unwrap();
        let log = run_tracker(&seq, &store, &model, &cfg, &MockProvider).unwrap();
        assert_eq!(log.frames.len(), seq.len());
        assert_eq!(log.frames[0].pred, seq.gt_boxes[0]);
        assert_eq!(log.frames[0].iou, 1.0);
        assert!(log.frames.iter().all(|f| f.kb_size[0] <= cfg.kb_capacity));
        assert_eq!(log.recompute_summary().unwrap(), log.summary);
    }

    #[test]
    fn unreachable_threshold_never_updates() {
        let (mut cfg, seq) = tiny();
        cfg.update_threshold = 1.01;
        cfg.update_interval = 1;
        let (store, model) = Model::init(&cfg).unwrap();
        let log = run_tracker(&seq, &store, &model, &cfg, &MockProvider).unwrap();
        assert!(log.frames.iter().all(|f| !f.updated));
        assert!(log.frames.iter().all(|f| f.description_used == log.frames[0].description_used));
    }
}
