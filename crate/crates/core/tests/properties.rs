use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ragtrack_core::crm::{gate_tokens, kb_retrieve, KnowledgeBase};
use ragtrack_core::encoder::Boundaries;
use ragtrack_core::fusion::{exchange_channels, retained_count, score_search_tokens, select_tokens, ExchangePlan};
use ragtrack_core::harness::{center_error, iou, precision_rate, success_rate};
use ragtrack_core::head::{decode_bbox, giou_loss_rect, PredictionMaps};
use ragtrack_core::numeric::{cosine_similarity, layer_norm, matmul, softmax_rows, Tape, Tensor};

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[rows, cols], 3.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rect() -> impl Strategy<Value = [f64; 4]> {
    (-20.0..20.0f64, -20.0..20.0f64, 0.5..15.0f64, 0.5..15.0f64).prop_map(|(x, y, w, h)| [x, y, w, h])
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..9, seed: u64) {
        let s = softmax_rows(&tensor(r, c, seed));
        for i in 0..r {
            prop_assert!(s.row(i).iter().all(|&v| v > 0.0));
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(n in 1usize..5, k in 1usize..6, m in 1usize..5, seed: u64) {
        let (a, b) = (tensor(n, k, seed), tensor(k, m, seed ^ 1));
        let got = matmul(&a, &b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|t| a.at(i, t) * b.at(t, j)).sum();
                prop_assert!((got.at(i, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_centers_rows(r in 1usize..5, c in 2usize..12, seed: u64) {
        let out = layer_norm(&tensor(r, c, seed), &Tensor::ones(&[c]), &Tensor::zeros(&[c]), 1e-5).unwrap();
        for i in 0..r {
            prop_assert!((out.row(i).iter().sum::<f64>() / c as f64).abs() <= 1e-10);
        }
    }

    #[test]
    fn selection_keeps_top_scores(scores in prop::collection::vec(0u8..5, 1..40), gamma in 0.01..=1.0f64) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let n = scores.len();
        let kept = select_tokens(&scores, gamma).unwrap().kept_indices;
        prop_assert_eq!(kept.len(), retained_count(gamma, n));
        prop_assert_eq!(kept.len(), (gamma * n as f64 - 1e-9).ceil() as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut want = order[..kept.len()].to_vec();
        want.sort_unstable();
        prop_assert_eq!(kept, want);
    }

    #[test]
    fn exchange_preserves_multiset_and_undoes_itself(
        n in 1usize..5, c in 1usize..9, mask in prop::collection::vec(any::<bool>(), 8), seed: u64,
    ) {
        let (fb, fr) = (tensor(n, c, seed), tensor(n, c, seed ^ 7));
        let idx: Vec<usize> = (0..c).filter(|&j| mask[j]).collect();
        let plan = ExchangePlan { sigma: idx.len() as f64 / c as f64, channel_indices: idx };
        let (b, r) = exchange_channels(&fb, &fr, &plan).unwrap();
        for i in 0..n {
            for j in 0..c {
                let mut before = [fb.at(i, j), fr.at(i, j)];
                let mut after = [b.at(i, j), r.at(i, j)];
                before.sort_by(f64::total_cmp);
                after.sort_by(f64::total_cmp);
                prop_assert_eq!(before, after);
            }
        }
        let (bb, rr) = exchange_channels(&b, &r, &plan).unwrap();
        prop_assert_eq!(bb.data(), fb.data());
        prop_assert_eq!(rr.data(), fr.data());
    }

    #[test]
    fn search_scores_sum_their_segments(g in 1usize..4, n_x in 1usize..10, seed: u64) {
        let bounds = Boundaries::from_lengths(1, 1, g * g, n_x);
        let n = bounds.total();
        let attn = softmax_rows(&tensor(n, n, seed));
        let s = score_search_tokens(&attn, &bounds).unwrap();
        prop_assert_eq!(s.total.len(), n_x);
        let k = g.div_ceil(2);
        let start = (g - k) / 2;
        for (q, &total) in s.total.iter().enumerate() {
            let row = attn.row(2 + g * g + q);
            let z: f64 = (start..start + k)
                .flat_map(|a| (start..start + k).map(move |b| 2 + a * g + b))
                .map(|t| row[t])
                .sum();
            let x: f64 = row[2 + g * g..].iter().sum();
            prop_assert!((total - (row[0] + row[1] + z + x)).abs() <= 1e-12);
        }
    }

    #[test]
    fn knowledge_base_stays_bounded_and_distinct(
        inserts in prop::collection::vec(prop::collection::vec(-3i8..=3, 3), 1..40),
        cap in 1usize..6,
        lambda in 0.1..=1.0f64,
        k in 1usize..6,
    ) {
        let mut kb = KnowledgeBase::new(cap, lambda).unwrap();
        for (t, v) in inserts.iter().enumerate() {
            let v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            if v.iter().all(|&x| x == 0.0) {
                continue;
            }
            kb.insert(&v, t).unwrap();
            prop_assert!(kb.len() <= cap);
        }
        let entries: Vec<Vec<f64>> = kb.entries().map(|e| e.vector.clone()).collect();
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                prop_assert!(cosine_similarity(a, b).unwrap() < lambda);
            }
        }
        if !kb.is_empty() {
            let q = [1.0, -0.5, 0.25];
            let got = kb_retrieve(&kb, &q, k).unwrap();
            let mut scan: Vec<(usize, f64)> =
                entries.iter().enumerate().map(|(i, e)| (i, cosine_similarity(&q, e).unwrap())).collect();
            scan.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
            let want: Vec<usize> = scan.iter().take(k).map(|s| s.0).collect();
            prop_assert_eq!(got.positions, want);
        }
    }

    #[test]
    fn gate_lies_strictly_inside_unit_interval(n_x in 1usize..8, n_r in 1usize..3, c in 1usize..8, seed: u64) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[n_x, c], 2.0, &mut ChaCha8Rng::seed_from_u64(seed)));
        let r = tape.constant(Tensor::uniform(&[n_r, c], 2.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 3)));
        let (_, gate) = gate_tokens(&mut tape, x, r).unwrap();
        prop_assert_eq!(tape.value(gate).shape(), &[n_x, 1]);
        prop_assert!(tape.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn decode_ignores_monotone_rescaling_of_scores(g in 1usize..6, seed: u64) {
        let maps = PredictionMaps {
            grid: g,
            cls: tensor(g, g, seed),
            offset: [tensor(g, g, seed ^ 1), tensor(g, g, seed ^ 2)],
            size: [tensor(g, g, seed ^ 3), tensor(g, g, seed ^ 4)],
        };
        let mut cubed = maps.clone();
        cubed.cls.data_mut().iter_mut().for_each(|v| *v = v.powi(3));
        prop_assert_eq!(decode_bbox(&maps), decode_bbox(&cubed));
    }

    #[test]
    fn giou_loss_is_symmetric_and_vanishes_on_equal_boxes(a in rect(), b in rect()) {
        let (ab, ba) = (giou_loss_rect(a, b).unwrap(), giou_loss_rect(b, a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=2.0).contains(&ab));
        prop_assert!(giou_loss_rect(a, a).unwrap().abs() <= 1e-12);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in rect(), b in rect()) {
        let v = iou(&a, &b).unwrap();
        prop_assert_eq!(v, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(center_error(&a, &b), center_error(&b, &a));
    }

    #[test]
    fn rates_match_counting(values in prop::collection::vec(0.0..=1.0f64, 1..30), thr in 0.0..40.0f64) {
        let n = values.len() as f64;
        let errors: Vec<f64> = values.iter().map(|v| v * 50.0).collect();
        let pr = precision_rate(&errors, thr).unwrap();
        prop_assert_eq!(pr, errors.iter().filter(|&&e| e <= thr).count() as f64 / n);
        let mut hits = 0usize;
        for i in 0..=20 {
            hits += values.iter().filter(|&&v| v > i as f64 / 20.0).count();
        }
        let sr = success_rate(&values).unwrap();
        prop_assert!((sr - hits as f64 / (21.0 * n)).abs() <= 1e-12);
    }
}
