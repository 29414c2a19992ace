use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn small_cfg(layers: usize, fusion: Vec<usize>) -> EncoderConfig {
    EncoderConfig {
        channels: 16,
        layers,
        heads: 2,
        fusion_layers: fusion,
        vocab_size: 64,
        ..EncoderConfig::default()
    }
}

fn random_image(edge: usize, rng: &mut impl Rng) -> Image {
    Image::new(edge, (0..3 * edge * edge).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, EncoderParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = EncoderParams::new(cfg, &mut store, &mut rng).unwrap();
    (store, enc)
}

fn text_value(store: &ParamStore, enc: &EncoderParams, s: &str) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let v = encode_text(&mut tape, &p, &enc.text, s).unwrap();
    tape.value(v).clone()
}

#[test]
fn patch_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(patchify(&random_image(64, &mut rng), 8).unwrap().shape(), &[64, 192]);
    assert_eq!(patchify(&random_image(32, &mut rng), 8).unwrap().shape(), &[16, 192]);
    assert!(matches!(patchify(&random_image(30, &mut rng), 8), Err(Error::Config(_))));
}

#[test]
fn patch_order_is_row_major() {
    let mut img = Image::filled(16, [0.0; 3]);
    // top-right patch of a 2×2 grid
    img.set(1, 2, 9, 0.5);
    let p = patchify(&img, 8).unwrap();
    assert_eq!(p.at(1, 64 + 2 * 8 + 1), 0.5);
    assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 1);
}

#[test]
fn zero_image_yields_position_embedding() {
    let cfg = EncoderConfig::default();
    let (store, enc) = build(&cfg, 3);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let img = Image::filled(64, [0.0; 3]);
    let x = patch_embed(&mut tape, &p, &enc.patch, enc.pos_search, &img, 8).unwrap();
    assert_eq!(tape.value(x).data(), store.get(enc.pos_search).data());
}

#[test]
fn text_encoding_is_deterministic_and_order_free() {
    let cfg = small_cfg(1, vec![1]);
    let (store, enc) = build(&cfg, 5);
    let a = text_value(&store, &enc, "a red car");
    assert_eq!(a.shape(), &[1, 16]);
    assert_eq!(a.data(), text_value(&store, &enc, "a red car").data());
    assert_eq!(
        text_value(&store, &enc, "red car").data(),
        text_value(&store, &enc, "car red").data()
    );
    assert_eq!(
        text_value(&store, &enc, "Red, CAR!").data(),
        text_value(&store, &enc, "red car").data()
    );
    assert_ne!(a.data(), text_value(&store, &enc, "a blue car").data());
}

#[test]
fn empty_description_pools_prefix_only() {
    let cfg = small_cfg(1, vec![1]);
    let (store, enc) = build(&cfg, 6);
    let got = text_value(&store, &enc, "");

    // independent pooling: learnable prefix rows plus the fixed prefix words
    let table = store.get(enc.text.table);
    let prefix = store.get(enc.text.prefix);
    let words = ["a", "sequence", "of", "a", "object"];
    assert_eq!(tokenize(&format!("{PREFIX_HEAD} {PREFIX_TAIL}")), words);
    let mut pooled = [0.0; 16];
    let mut rows: Vec<&[f64]> = (0..prefix.rows()).map(|i| prefix.row(i)).collect();
    rows.extend(enc.text.word_rows("").into_iter().map(|r| table.row(r)));
    assert_eq!(rows.len(), 2 + words.len());
    for r in &rows {
        for (acc, v) in pooled.iter_mut().zip(*r) {
            *acc += v;
        }
    }
    let pooled = Tensor::new(vec![1, 16], pooled.iter().map(|v| v / rows.len() as f64).collect()).unwrap();
    let w = store.get(enc.text.proj.w);
    let want = pooled.matmul(w).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

fn single_layer_seq(tape: &mut Tape, n: usize, c: usize, rng: &mut impl Rng) -> TokenSequence {
    let r = tape.constant(Tensor::uniform(&[1, c], 1.0, rng));
    let h = tape.constant(Tensor::uniform(&[1, c], 1.0, rng));
    let z = tape.constant(Tensor::uniform(&[n.saturating_sub(3).min(1), c], 1.0, rng));
    let x = tape.constant(Tensor::uniform(&[n - 2 - tape.value(z).rows(), c], 1.0, rng));
    build_sequence(tape, Modality::Rgb, r, h, z, x).unwrap()
}

#[test]
fn zero_deltas_give_identity_layer() {
    let cfg = small_cfg(1, vec![1]);
    let (mut store, enc) = build(&cfg, 7);
    let layer = &enc.layers[0];
    *store.get_mut(layer.delta1) = Tensor::scalar(0.0).with_grad();
    *store.get_mut(layer.delta2) = Tensor::scalar(0.0).with_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let seq = single_layer_seq(&mut tape, 10, 16, &mut rng);
    let (out, _) = encoder_layer(&mut tape, &p, layer, 2, &seq).unwrap();
    assert_eq!(tape.value(out.tokens).data(), tape.value(seq.tokens).data());
    assert_eq!(out.bounds, seq.bounds);
}

#[test]
fn attention_rows_on_simplex() {
    let cfg = small_cfg(1, vec![1]);
    let (store, enc) = build(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for n in [3, 7, 20] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let seq = single_layer_seq(&mut tape, n, 16, &mut rng);
        let (_, attn) = encoder_layer(&mut tape, &p, &enc.layers[0], 2, &seq).unwrap();
        assert_eq!(attn.shape(), &[n, n]);
        for i in 0..n {
            let s: f64 = attn.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row {i} sums to {s}");
            assert!(attn.row(i).iter().all(|&a| a >= 0.0));
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = small_cfg(1, vec![1]);
    let (store, enc) = build(&cfg, 11);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let tokens = tape.constant(Tensor::full(&[1, 16], 0.3));
    let seq = TokenSequence {
        tokens,
        bounds: Boundaries::from_lengths(0, 0, 0, 1),
        modality: Modality::Tir,
        search_index: vec![0],
        discarded: Vec::new(),
    };
    let (_, attn) = encoder_layer(&mut tape, &p, &enc.layers[0], 2, &seq).unwrap();
    assert_eq!(attn.data(), &[1.0]);
}

struct CountingHook(Vec<usize>);

impl LayerHook for CountingHook {
    fn after_layer(
        &mut self,
        _: &mut Tape,
        _: &Bound,
        layer: usize,
        _: &mut TokenSequence,
        _: &mut TokenSequence,
        _: &AttentionRecord,
        _: &AttentionRecord,
    ) -> Result<()> {
        self.0.push(layer);
        Ok(())
    }
}

fn run(
    cfg: &EncoderConfig,
    store: &ParamStore,
    enc: &EncoderParams,
    z: [&Image; 2],
    x: [&Image; 2],
    hook: &mut dyn LayerHook,
) -> (Tensor, Tensor, usize) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let text = encode_text(&mut tape, &p, &enc.text, "white square").unwrap();
    let r = tape.constant(Tensor::full(&[1, cfg.channels], 0.1));
    let rgb = EncoderInput { template: z[0], search: x[0], text, reasoning: r };
    let tir = EncoderInput { template: z[1], search: x[1], text, reasoning: r };
    let out = forward_encoder(&mut tape, &p, enc, cfg, &rgb, &tir, hook).unwrap();
    for a in out.attention.iter().flatten() {
        for i in 0..a.rows() {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
    assert_eq!(out.rgb.bounds.0, [0, 1, 2, 2 + cfg.template_tokens(), 2 + cfg.template_tokens() + cfg.search_tokens()]);
    (
        tape.value(out.rgb.tokens).clone(),
        tape.value(out.tir.tokens).clone(),
        out.attention.len(),
    )
}

#[test]
fn shared_branches_agree_on_identical_inputs() {
    let cfg = small_cfg(3, vec![3]);
    let (store, enc) = build(&cfg, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = random_image(32, &mut rng);
    let x = random_image(64, &mut rng);
    let (a, b, layers) = run(&cfg, &store, &enc, [&z, &z], [&x, &x], &mut NoHook);
    assert_eq!(layers, 3);
    assert_eq!(a.data(), b.data());

    let x2 = random_image(64, &mut rng);
    let (a, b, _) = run(&cfg, &store, &enc, [&z, &z], [&x, &x2], &mut NoHook);
    assert_ne!(a.data(), b.data());
}

#[test]
fn hook_runs_once_per_fusion_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let z = random_image(32, &mut rng);
    let x = random_image(64, &mut rng);

    let cfg = small_cfg(1, vec![1]);
    let (store, enc) = build(&cfg, 15);
    let mut hook = CountingHook(Vec::new());
    run(&cfg, &store, &enc, [&z, &z], [&x, &x], &mut hook);
    assert_eq!(hook.0, vec![1]);

    let cfg = small_cfg(4, vec![2, 4]);
    let (store, enc) = build(&cfg, 16);
    let mut hook = CountingHook(Vec::new());
    run(&cfg, &store, &enc, [&z, &z], [&x, &x], &mut hook);
    assert_eq!(hook.0, vec![2, 4]);
}
