//! Quick oracle checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrackerConfig;
use super::metrics::{iou, max_metrics, pr_sr, precision_rate, success_rate, PixelBox};
use crate::crm::{kb_retrieve, KnowledgeBase};
use crate::fusion::{exchange_channels, select_tokens, ExchangePlan};
use crate::head::{giou_loss_rect, total_loss, LossComponents, LossWeights};
use crate::numeric::{cosine_similarity, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(), String>) -> CheckResult {
    match f() {
        Ok(()) => CheckResult {
            name,
            passed: true,
            detail: String::new(),
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config_defaults() -> Result<(), String> {
    let c = TrackerConfig::default();
    let got = (c.gamma, c.sigma, c.kb_capacity, c.retrieve_k, c.lambda, c.update_threshold, c.update_interval);
    ensure(got == (0.85, 0.5, 4, 2, 1.0, 0.65, 5), || format!("{got:?}"))?;
    let tokens = (c.encoder.reasoning_tokens, c.encoder.text_tokens);
    ensure(tokens == (1, 1), || format!("reasoning/text tokens {tokens:?}"))?;
    let w = (c.loss_weights.lambda_iou, c.loss_weights.lambda_l1);
    ensure(w == (2.0, 5.0), || format!("loss weights {w:?}"))?;
    ensure(c.train.lr == 1e-4 && c.train.weight_decay == 1e-4, || "optimizer defaults".into())
}

fn selection(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..200 {
        let n = rng.gen_range(4..=64);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let gamma = rng.gen_range(0.05..=1.0);
        let got = select_tokens(&scores, gamma).map_err(|e| e.to_string())?.kept_indices;
        let keep = (gamma * n as f64 - 1e-9).ceil() as usize;
        let mut want: Vec<usize> = (0..n)
            .filter(|&i| {
                let better = (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
                better < keep
            })
            .collect();
        want.sort_unstable();
        ensure(got == want, || format!("{scores:?} γ={gamma}: {got:?} vs {want:?}"))?;
    }
    Ok(())
}

fn exchange(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..100 {
        let (n, c) = (rng.gen_range(1..6), rng.gen_range(1..9));
        let fb = Tensor::uniform(&[n, c], 1.0, rng);
        let fr = Tensor::uniform(&[n, c], 1.0, rng);
        let idx: Vec<usize> = (0..c).filter(|_| rng.gen_bool(0.5)).collect();
        let plan = ExchangePlan {
            channel_indices: idx.clone(),
            sigma: idx.len() as f64 / c as f64,
        };
        let (b, r) = exchange_channels(&fb, &fr, &plan).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..c {
                let (wb, wr) = if idx.contains(&j) { (fr.at(i, j), fb.at(i, j)) } else { (fb.at(i, j), fr.at(i, j)) };
                ensure(b.at(i, j) == wb && r.at(i, j) == wr, || format!("mismatch at ({i},{j})"))?;
            }
        }
        let (bb, rr) = exchange_channels(&b, &r, &plan).map_err(|e| e.to_string())?;
        ensure(bb == fb && rr == fr, || "exchange is not an involution".into())?;
    }
    Ok(())
}

fn knowledge_base(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut kb = KnowledgeBase::new(4, 1.0).map_err(|e| e.to_string())?;
    for t in 0..500 {
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-2..=2) as f64).collect();
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        if rng.gen_bool(0.5) {
            let out = kb.insert(&v, t).map_err(|e| e.to_string())?;
            ensure(kb.len() <= 4, || "capacity exceeded".into())?;
            if out.inserted {
                let again = kb.insert(&v, t).map_err(|e| e.to_string())?;
                ensure(!again.inserted, || "duplicate accepted".into())?;
            }
        } else if !kb.is_empty() {
            let k = rng.gen_range(1..=5);
            let got = kb_retrieve(&kb, &v, k).map_err(|e| e.to_string())?;
            let mut all: Vec<(usize, f64)> = kb
                .entries()
                .enumerate()
                .map(|(i, e)| (i, cosine_similarity(&v, &e.vector).unwrap_or(f64::NAN)))
                .collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
            let want: Vec<usize> = all.iter().take(k).map(|x| x.0).collect();
            ensure(got.positions == want, || format!("retrieve {:?} vs {want:?}", got.positions))?;
        }
    }
    Ok(())
}

fn metrics() -> Result<(), String> {
    let e = |r: crate::Result<f64>| r.map_err(|e| e.to_string());
    ensure(e(iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 2.0, 2.0]))? == 1.0 / 7.0, || "iou 1/7".into())?;
    ensure(e(precision_rate(&[5.0, 25.0], 20.0))? == 0.5, || "precision".into())?;
    ensure(e(success_rate(&[1.0; 3]))? == 20.0 / 21.0, || "success all-perfect".into())?;
    ensure(e(success_rate(&[0.5]))? == 10.0 / 21.0, || "success 0.5".into())?;
    let gt: Vec<PixelBox> = vec![[0.0, 0.0, 4.0, 4.0], [3.0, 3.0, 4.0, 4.0], [6.0, 1.0, 2.0, 5.0]];
    let alt: Vec<PixelBox> = gt.iter().map(|b| [b[0] + 40.0, b[1], b[2], b[3]]).collect();
    let (pr, sr) = pr_sr(&gt, &gt, 20.0).map_err(|e| e.to_string())?;
    let (mpr, msr) = max_metrics(&gt, &[&alt, &gt], 20.0).map_err(|e| e.to_string())?;
    ensure(pr == 1.0 && sr == 20.0 / 21.0 && mpr == 1.0 && msr == sr, || "perfect track".into())
}

fn losses() -> Result<(), String> {
    let g = giou_loss_rect([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]).map_err(|e| e.to_string())?;
    let want = 1.0 - (1.0 / 7.0 - 2.0 / 9.0);
    ensure((g - want).abs() <= 1e-12, || format!("giou {g} vs {want}"))?;
    let t = total_loss(
        LossComponents {
            cls: 1.0,
            iou: 1.0,
            l1: 1.0,
        },
        LossWeights::default(),
    );
    ensure(t == 8.0, || format!("total {t}"))
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check("config_defaults", config_defaults),
        check("token_selection", || selection(&mut rng)),
        check("channel_exchange", || exchange(&mut rng)),
        check("knowledge_base", || knowledge_base(&mut rng)),
        check("metrics", metrics),
        check("losses", losses),
    ]
}
