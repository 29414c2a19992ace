//! AdamW training on augmented crops of synthetic sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TrackerConfig, TrainConfig};
use super::model::{crop_window, description_feature, forward_frame, target_in_crop, FrameInput, Model, TapeKb};
use super::synth::SequenceRecord;
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::head::{loss_var, update_running_stats, BBox, BnMode, BnStats, LossComponents};
use crate::imaging::{CropWindow, Image};
use crate::numeric::{Bound, ParamStore, Tape, Var};

/// Decoupled-weight-decay Adam over the trainable tensors of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; `grads` in store order, `None` treated as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::arg(format!("{} gradients for {} tensors", grads.len(), self.m.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            if !param.requires_grad {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in param.data_mut().iter_mut().enumerate() {
                let g = grads[k].as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Crop geometry perturbation for one search frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augment {
    /// Window shift as a fraction of the side.
    pub shift: [f64; 2],
    /// Relative change of the side.
    pub scale: f64,
    /// Radians.
    pub angle: f64,
    pub grayscale: bool,
}

impl Augment {
    pub fn sample(cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let mut sym = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let shift = [sym(cfg.jitter), sym(cfg.jitter)];
        let scale = sym(cfg.scale_jitter);
        let angle = sym(cfg.rotation_deg).to_radians();
        Self {
            shift,
            scale,
            angle,
            grayscale: rng.gen_bool(cfg.grayscale_prob.clamp(0.0, 1.0)),
        }
    }
}

/// Crops and target for one (template frame, search frame) pair.
pub struct Sample {
    pub template: [Image; 2],
    pub search: [Image; 2],
    pub target: BBox,
    pub description: String,
}

pub fn template_crops(seq: &SequenceRecord, frame: usize, bbox: &[f64; 4], cfg: &TrackerConfig) -> Result<[Image; 2]> {
    let w = crop_window(bbox, cfg.template_factor, seq.edge())?;
    let e = cfg.encoder.template_edge;
    Ok([seq.rgb[frame].crop(&w, e, 0.0), seq.tir[frame].crop(&w, e, 0.0)])
}

pub fn make_sample(
    seq: &SequenceRecord,
    template_frame: usize,
    search_frame: usize,
    cfg: &TrackerConfig,
    aug: Augment,
) -> Result<Sample> {
    if template_frame >= seq.len() || search_frame >= seq.len() {
        return Err(Error::arg(format!(
            "frames {template_frame}/{search_frame} outside a {}-frame sequence",
            seq.len()
        )));
    }
    let mut template = template_crops(seq, template_frame, &seq.gt_boxes[template_frame], cfg)?;
    let gt = &seq.gt_boxes[search_frame];
    let side = cfg.search_factor * (gt[2] * gt[3]).sqrt() * (1.0 + aug.scale);
    let (cx, cy) = (gt[0] + gt[2] / 2.0, gt[1] + gt[3] / 2.0);
    let window = CropWindow::centered_clamped(
        cx + aug.shift[0] * side,
        cy + aug.shift[1] * side,
        side,
        seq.edge(),
    );
    let e = cfg.encoder.search_edge;
    let mut search = [
        seq.rgb[search_frame].crop(&window, e, aug.angle),
        seq.tir[search_frame].crop(&window, e, aug.angle),
    ];
    if aug.grayscale {
        template[0] = template[0].grayscale();
        search[0] = search[0].grayscale();
    }
    Ok(Sample {
        template,
        search,
        target: target_in_crop(gt, &window, aug.angle, cfg),
        description: seq.descriptions[search_frame].clone(),
    })
}

pub struct ClipLoss {
    pub total: Var,
    pub components: LossComponents,
    pub bn_stats: Vec<Vec<BnStats>>,
}

/// Mean loss over `clip`, carrying reasoning tokens and knowledge bases
/// from frame to frame. The bases start with the feature of
/// `initial_description`.
pub fn clip_loss(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    cfg: &TrackerConfig,
    initial_description: &str,
    clip: &[Sample],
    mode: BnMode,
) -> Result<ClipLoss> {
    if clip.is_empty() {
        return Err(Error::EmptyInput("clip_loss"));
    }
    let grid = cfg.encoder.search_edge / cfg.encoder.patch;
    let mut kbs = [
        TapeKb::new(cfg.kb_capacity, cfg.lambda)?,
        TapeKb::new(cfg.kb_capacity, cfg.lambda)?,
    ];
    for (slot, m) in [Modality::Rgb, Modality::Tir].into_iter().enumerate() {
        let f = description_feature(tape, p, model, m, initial_description)?;
        kbs[slot].insert(tape, f, 0)?;
    }
    let r0 = p[model.crm.r0];
    let mut reasoning = [r0, r0];
    let mut totals = Vec::with_capacity(clip.len());
    let mut components = LossComponents::default();
    let mut bn_stats = Vec::with_capacity(clip.len());
    for (t, s) in clip.iter().enumerate() {
        let input = FrameInput {
            template: [&s.template[0], &s.template[1]],
            search: [&s.search[0], &s.search[1]],
            description: &s.description,
        };
        let out = forward_frame(tape, p, model, cfg, &input, reasoning, [&kbs[0], &kbs[1]], mode)?;
        let loss = loss_var(tape, out.out, grid, &s.target, cfg.loss_weights)?;
        totals.push(loss.total);
        components.cls += loss.components.cls / clip.len() as f64;
        components.iou += loss.components.iou / clip.len() as f64;
        components.l1 += loss.components.l1 / clip.len() as f64;
        bn_stats.push(out.bn_stats);
        reasoning = out.next_reasoning;
        if t + 1 < clip.len() {
            for (slot, m) in [Modality::Rgb, Modality::Tir].into_iter().enumerate() {
                let f = description_feature(tape, p, model, m, &s.description)?;
                kbs[slot].insert(tape, f, t + 1)?;
            }
        }
    }
    let mut total = totals[0];
    for &l in &totals[1..] {
        total = tape.add(total, l)?;
    }
    let total = tape.scale(total, 1.0 / clip.len() as f64);
    Ok(ClipLoss {
        total,
        components,
        bn_stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sequence: usize,
    pub frame: usize,
    pub total: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Fixed-set loss before the first step.
    pub initial_eval: f64,
    /// Fixed-set loss after the last step.
    pub final_eval: f64,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.steps {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&serde_json::json!({
            "initial_eval": self.initial_eval,
            "final_eval": self.final_eval,
        }))?);
        s.push('\n');
        Ok(s)
    }
}

/// Search frames of the fixed evaluation set: evenly spaced over `1..len`.
pub fn eval_frames(len: usize, count: usize) -> Vec<usize> {
    if len < 2 || count == 0 {
        return Vec::new();
    }
    let n = count.min(len - 1);
    let mut v: Vec<usize> = (0..n).map(|i| 1 + i * (len - 1) / n).collect();
    v.dedup();
    v
}

/// Mean single-frame loss over un-augmented crops of `eval_frames` frames of
/// every sequence, template from frame 0, running batch-norm statistics.
pub fn evaluate_loss(dataset: &[SequenceRecord], cfg: &TrackerConfig, store: &ParamStore, model: &Model) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for seq in dataset {
        for f in eval_frames(seq.len(), cfg.train.eval_frames) {
            let sample = make_sample(seq, 0, f, cfg, Augment::default())?;
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let l = clip_loss(&mut tape, &p, model, cfg, &seq.descriptions[0], &[sample], BnMode::Frozen)?;
            sum += tape.value(l.total).item();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("evaluate_loss"));
    }
    Ok(sum / n as f64)
}

/// Runs `cfg.train.steps` AdamW steps, each on one augmented clip drawn
/// from a random sequence.
pub fn train(dataset: &[SequenceRecord], cfg: &TrackerConfig, store: &mut ParamStore, model: &Model) -> Result<TrainLog> {
    train_with(dataset, cfg, store, model, |_| {})
}

/// As [`train`], calling `progress` after every step.
pub fn train_with(
    dataset: &[SequenceRecord],
    cfg: &TrackerConfig,
    store: &mut ParamStore,
    model: &Model,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    cfg.validate()?;
    let tc = &cfg.train;
    for seq in dataset {
        seq.validate()?;
        if seq.len() < tc.clip_len + 1 {
            return Err(Error::Config(format!(
                "sequence of {} frames too short for clips of {}",
                seq.len(),
                tc.clip_len
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x74_7261_696e));
    let mut opt = AdamW::new(store, tc);
    let mut log = TrainLog {
        initial_eval: evaluate_loss(dataset, cfg, store, model)?,
        ..TrainLog::default()
    };
    for step in 0..tc.steps {
        let si = rng.gen_range(0..dataset.len());
        let seq = &dataset[si];
        let start = rng.gen_range(1..=seq.len() - tc.clip_len);
        let template_frame = rng.gen_range(0..start);
        let clip = (start..start + tc.clip_len)
            .map(|f| make_sample(seq, template_frame, f, cfg, Augment::sample(tc, &mut rng)))
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let loss = clip_loss(
            &mut tape,
            &p,
            model,
            cfg,
            &seq.descriptions[template_frame],
            &clip,
            BnMode::Batch,
        )?;
        let total = tape.value(loss.total).item();
        if !total.is_finite() {
            return Err(Error::arg(format!("non-finite loss at step {step}")));
        }
        tape.backward(loss.total)?;
        let grads: Vec<Option<Vec<f64>>> = p.grads(&tape).into_iter().map(|g| g.map(<[f64]>::to_vec)).collect();
        drop(tape);
        opt.step(store, &grads)?;
        for stats in &loss.bn_stats {
            update_running_stats(store, &model.head, stats);
        }
        let rec = StepRecord {
            step,
            sequence: si,
            frame: start,
            total,
            cls: loss.components.cls,
            iou: loss.components.iou,
            l1: loss.components.l1,
        };
        progress(&rec);
        log.steps.push(rec);
    }
    log.final_eval = evaluate_loss(dataset, cfg, store, model)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_sequence, SequenceSpec};
    use crate::numeric::Tensor;

    fn tiny_cfg(steps: usize) -> TrackerConfig {
        let mut cfg = TrackerConfig::default();
        cfg.encoder.channels = 16;
        cfg.encoder.layers = 2;
        cfg.encoder.heads = 2;
        cfg.encoder.fusion_layers = vec![1, 2];
        cfg.encoder.vocab_size = 64;
        cfg.train.steps = steps;
        cfg.train.eval_frames = 2;
        cfg
    }

    fn tiny_seq() -> SequenceRecord {
        gen_sequence(&SequenceSpec {
            length: 6,
            edge: 64,
            target_size: 12.0,
            ..SequenceSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn adamw_first_step_matches_hand_update() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(&[1.0, -2.0]).with_grad());
        store.add("buf", Tensor::vector(&[5.0]));
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[Some(vec![0.5, 0.0]), Some(vec![1.0])]).unwrap();
        // bias-corrected moments give m̂/√v̂ = sign(g) on the first step
        let want0 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
        let want1 = -2.0 - 0.1 * (0.0 + 0.01 * -2.0);
        assert!((store.get(id).data()[0] - want0).abs() < 1e-15);
        assert!((store.get(id).data()[1] - want1).abs() < 1e-15);
        assert_eq!(store.get(store.id("buf").unwrap()).data(), &[5.0]);
    }

    #[test]
    fn rotated_target_maps_back() {
        let cfg = TrackerConfig::default();
        let w = CropWindow { x0: 10.0, y0: 20.0, side: 32.0 };
        let bbox = [30.0, 36.0, 8.0, 8.0];
        // target center on the window center is unaffected by rotation
        let b = target_in_crop(&[22.0, 32.0, 8.0, 8.0], &w, 0.3, &cfg);
        assert!((b.x - 4.0).abs() < 1e-12 && (b.y - 4.0).abs() < 1e-12);
        assert!((b.w - 0.25).abs() < 1e-12);
        let b = target_in_crop(&bbox, &w, 0.0, &cfg);
        assert!((b.x - 6.0).abs() < 1e-12 && (b.y - 5.0).abs() < 1e-12);
        let back = crate::harness::model::box_to_frame(&b, &w, &cfg);
        for (a, e) in back.iter().zip(bbox) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_frames_spread() {
        assert_eq!(eval_frames(9, 4), vec![1, 3, 5, 7]);
        assert_eq!(eval_frames(3, 8), vec![1, 2]);
        assert!(eval_frames(1, 8).is_empty());
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let cfg = tiny_cfg(0);
        let (mut store, model) = Model::init(&cfg).unwrap();
        let before = store.clone();
        let log = train(&[tiny_seq()], &cfg, &mut store, &model).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(log.initial_eval, log.final_eval);
        for ((_, a), (_, b)) in before.iter().zip(store.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = tiny_cfg(3);
        let seq = tiny_seq();
        let run = || {
            let (mut store, model) = Model::init(&cfg).unwrap();
            train(std::slice::from_ref(&seq), &cfg, &mut store, &model).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 3);
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = tiny_cfg(1);
        let (mut store, model) = Model::init(&cfg).unwrap();
        assert!(matches!(train(&[], &cfg, &mut store, &model), Err(Error::EmptyInput(_))));
    }
}
