use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{Boundaries, DiscardedToken, Modality};
use crate::numeric::gradcheck::check_param_gradients;

fn full_seq(tokens: Var, n: usize) -> TokenSequence {
    TokenSequence {
        tokens,
        bounds: Boundaries::from_lengths(0, 0, 0, n),
        modality: Modality::Rgb,
        search_index: (0..n).collect(),
        discarded: Vec::new(),
    }
}

fn maps_from(cls: Tensor, off: f64, size: f64) -> PredictionMaps {
    let g = cls.rows();
    PredictionMaps {
        grid: g,
        cls,
        offset: [Tensor::full(&[g, g], off), Tensor::full(&[g, g], off)],
        size: [Tensor::full(&[g, g], size), Tensor::full(&[g, g], size)],
    }
}

#[test]
fn decode_examples() {
    let mut cls = Tensor::zeros(&[8, 8]);
    cls.set(3, 5, 1.0);
    assert_eq!(
        decode_bbox(&maps_from(cls, 0.5, 0.25)),
        BBox { x: 3.5, y: 5.5, w: 0.25, h: 0.25 }
    );
    assert_eq!(argmax_cell(&Tensor::full(&[8, 8], 0.3)), (0, 0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let cls = Tensor::uniform(&[6, 6], 1.0, &mut rng);
        let mut best = (0, 0);
        for i in 0..6 {
            for j in 0..6 {
                if cls.at(i, j) > cls.at(best.0, best.1) {
                    best = (i, j);
                }
            }
        }
        assert_eq!(argmax_cell(&cls), best);
        let mut cubed = cls.clone();
        cubed.data_mut().iter_mut().for_each(|v| *v = v.powi(3));
        assert_eq!(argmax_cell(&cubed), best);
    }
}

#[test]
fn maps_follow_token_layout() {
    let mut out = Tensor::zeros(&[16, 5]);
    // token r=1, c=2 is map cell (i=2, j=1)
    out.set(4 + 2, 0, 0.9);
    out.set(4 + 2, 1, 0.25);
    let maps = PredictionMaps::from_output(&out, 4).unwrap();
    assert_eq!(maps.cls.at(2, 1), 0.9);
    assert_eq!(decode_bbox(&maps).x, 2.25);
    assert_eq!(decode_bbox(&maps).y, 1.0);
    assert!(PredictionMaps::from_output(&out, 5).is_err());
}

#[test]
fn focal_matches_plug_in_and_hand_values() {
    // loss at I = clipped target, evaluated straight from the formula
    let gt = BBox { x: 3.5, y: 4.5, w: 0.2, h: 0.2 };
    let target = gt_heatmap(8, (gt.x, gt.y), gaussian_sigma(&gt, 8)).unwrap();
    assert_eq!(gaussian_sigma(&gt, 8), 1.0);
    assert_eq!(target.at(3, 4), 1.0);
    let mut plug = 0.0;
    for &y in target.data() {
        let p = y.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        plug += if y == 1.0 {
            -(1.0 - p).powi(2) * p.ln()
        } else {
            -(1.0 - y).powi(4) * p * p * (1.0 - p).ln()
        };
    }
    let got = focal_loss(&target, &gt).unwrap();
    assert!((got - plug).abs() < 1e-12);
    assert!(got > 1e-3 && got < 0.1, "plug-in focal {got}");

    let half = Tensor::full(&[2, 2], 0.5);
    let gt = BBox { x: 0.5, y: 0.5, w: 0.1, h: 0.1 };
    let a = (1.0 - (-0.5f64).exp()).powi(4);
    let b = (1.0 - (-1.0f64).exp()).powi(4);
    let hand = 0.25 * 2f64.ln() * (1.0 + 2.0 * a + b);
    assert!((focal_loss(&half, &gt).unwrap() - hand).abs() < 1e-12);

    assert!(focal_loss(&half, &BBox { x: 2.0, ..gt }).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let m = Tensor::uniform(&[4, 4], 0.5, &mut rng);
        let m = Tensor::new(vec![4, 4], m.data().iter().map(|v| v + 0.5).collect()).unwrap();
        let gt = BBox { x: rng.gen_range(0.0..4.0), y: rng.gen_range(0.0..4.0), w: 0.3, h: 0.3 };
        assert!(focal_loss(&m, &gt).unwrap() >= 0.0);
    }
}

#[test]
fn l1_examples() {
    let a = BBox { x: 2.0, y: 3.0, w: 0.2, h: 0.3 };
    assert_eq!(l1_loss(&a, &a, 8), 0.0);
    let b = BBox { x: 2.8, y: 3.8, w: 0.3, h: 0.4 };
    assert!((l1_loss(&a, &b, 8) - 0.1).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p: [f64; 4] = std::array::from_fn(|_| rng.gen());
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen());
        let want = (0..4).map(|k| (p[k] - q[k]).abs()).sum::<f64>() / 4.0;
        assert!((l1_terms(p, q).0 - want).abs() < 1e-15);
    }
}

#[test]
fn giou_examples() {
    let l = giou_loss_rect([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]).unwrap();
    assert!((l - (1.0 - (1.0 / 7.0 - 2.0 / 9.0))).abs() < 1e-12);
    assert!((l - 1.0794).abs() < 1e-4);
    assert_eq!(giou_loss_rect([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
    let far = giou_loss_rect([0.0, 0.0, 1.0, 1.0], [100.0, 0.0, 1.0, 1.0]).unwrap();
    assert!(far > 1.98 && far < 2.0);
    assert!(matches!(giou_loss_rect([0.0, 0.0, 0.0, 1.0], [0.0; 4]), Err(Error::DegenerateBox(_))));

    let a = BBox { x: 2.0, y: 3.0, w: 0.2, h: 0.3 };
    let b = BBox { x: 2.5, y: 3.1, w: 0.25, h: 0.2 };
    assert_eq!(giou_loss(&a, &b, 8).unwrap(), giou_loss(&b, &a, 8).unwrap());
}

#[test]
fn loss_term_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    for _ in 0..200 {
        let p: [f64; 4] = [rng.gen(), rng.gen(), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6)];
        let q: [f64; 4] = [rng.gen(), rng.gen(), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6)];
        let (_, g) = giou_terms(p, q).unwrap();
        for k in 0..4 {
            let (mut a, mut b) = (p, p);
            a[k] += h;
            b[k] -= h;
            let fd = (giou_terms(a, q).unwrap().0 - giou_terms(b, q).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5, "giou grad {k}: {fd} vs {}", g[k]);
        }
    }
    let pred: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
    let target = gt_heatmap(4, (1.5, 2.5), 1.0).unwrap();
    let (_, g) = focal_terms(&pred, target.data()).unwrap();
    for k in 0..16 {
        let (mut a, mut b) = (pred.clone(), pred.clone());
        a[k] += h;
        b[k] -= h;
        let fd = (focal_terms(&a, target.data()).unwrap().0 - focal_terms(&b, target.data()).unwrap().0) / (2.0 * h);
        assert!((fd - g[k]).abs() < 1e-6);
    }
}

#[test]
fn total_loss_weighting() {
    let w = LossWeights::default();
    assert_eq!(total_loss(LossComponents::default(), w), 0.0);
    assert_eq!(total_loss(LossComponents { cls: 1.0, iou: 1.0, l1: 1.0 }, w), 8.0);
}

fn head_setup(c: usize, seed: u64) -> (ParamStore, HeadParams, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = HeadParams::new(&mut store, c, &mut rng);
    let a = Tensor::uniform(&[16, c], 1.0, &mut rng);
    let b = Tensor::uniform(&[16, c], 1.0, &mut rng);
    (store, head, a, b)
}

#[test]
fn head_shapes_and_range() {
    let (store, head, _, _) = head_setup(8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for mode in [BnMode::Batch, BnMode::Frozen] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(Tensor::uniform(&[64, 8], 3.0, &mut rng));
        let b = tape.constant(Tensor::uniform(&[64, 8], 3.0, &mut rng));
        let (sa, sb) = (full_seq(a, 64), full_seq(b, 64));
        assert_eq!(scatter_to_grid(&mut tape, a, &sa, 8).unwrap(), a);
        let out = head_forward(&mut tape, &p, &head, a, &sa, b, &sb, 8, mode).unwrap();
        assert_eq!(out.stats.len(), if mode == BnMode::Batch { 4 } else { 0 });
        let maps = PredictionMaps::from_output(tape.value(out.out), 8).unwrap();
        assert_eq!(maps.cls.shape(), &[8, 8]);
        assert_eq!(maps.offset[1].shape(), &[8, 8]);
        assert_eq!(maps.size[0].shape(), &[8, 8]);
        assert!(tape.value(out.out).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn scatter_fills_holes_with_frozen_values() {
    let mut tape = Tape::new();
    let live = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap());
    let seq = TokenSequence {
        tokens: live,
        bounds: Boundaries::from_lengths(0, 0, 0, 2),
        modality: Modality::Tir,
        search_index: vec![1, 3],
        discarded: vec![
            DiscardedToken { grid_index: 0, value: vec![7.0, 7.0] },
            DiscardedToken { grid_index: 2, value: vec![9.0, 9.0] },
        ],
    };
    let g = scatter_to_grid(&mut tape, live, &seq, 2).unwrap();
    assert_eq!(tape.value(g).data(), &[7.0, 7.0, 1.0, 1.0, 9.0, 9.0, 3.0, 3.0]);
    assert!(scatter_to_grid(&mut tape, live, &seq, 3).is_err());
}

#[test]
fn running_stats_move_toward_batch() {
    let (mut store, head, _, _) = head_setup(4, 7);
    let stats: Vec<BnStats> = (0..4).map(|_| BnStats { mean: vec![1.0; 4], var: vec![3.0; 4] }).collect();
    update_running_stats(&mut store, &head, &stats);
    assert!((store.get(head.bns[0].running_mean).data()[0] - 0.1).abs() < 1e-15);
    assert!((store.get(head.bns[3].running_var).data()[2] - 1.2).abs() < 1e-15);
}

#[test]
fn head_loss_gradients_match_finite_differences() {
    let (store, head, a, b) = head_setup(4, 8);
    let gt = BBox { x: 1.7, y: 2.2, w: 0.3, h: 0.4 };
    let loss_fn = |_: &ParamStore, tape: &mut Tape, p: &Bound| {
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let (sa, sb) = (full_seq(va, 16), full_seq(vb, 16));
        let out = head_forward(tape, p, &head, va, &sa, vb, &sb, 4, BnMode::Batch)?;
        Ok(loss_var(tape, out.out, 4, &gt, LossWeights::default())?.total)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let report = check_param_gradients(&store, loss_fn, 1e-5, 6, &mut rng).unwrap();
    assert!(report.max_rel_err <= 1e-3, "{report:?}");
    assert!(report.tensors >= 12);
}
