mod support;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdec_lab::arch::{AttentionPolicy, PositionScheme, TransformerSpec};
use specdec_lab::tinymodel::tau::{context_rng, run_context, DraftModel};
use specdec_lab::tinymodel::{
    forward_target, prune_init, spire_decode_step, spire_train_forward, LossKind, ModelParams, SpireState, TrainConfig, Variant,
};
use support::{gradcheck, reference};

fn micro(n_layer: u64, vocab: u64) -> TransformerSpec {
    TransformerSpec {
        n_layer,
        d_model: 8,
        n_heads: 2,
        n_kv_heads: 1,
        d_head: 4,
        d_ff: 16,
        vocab,
        bytes_per_param: 4,
        attention: AttentionPolicy::Dense,
        positions: PositionScheme::TextAbsolute,
    }
}

fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Nonzero, distinct mixing logits so every layer contributes.
fn perturb_mix(p: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = p.tensors().len() - 1;
    for w in &mut p.tensors_mut()[last].data {
        *w = rng.random_range(-1.5..1.5);
    }
}

fn max_diff(a: &[f64], b: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    assert_eq!(a.len(), flat.len());
    a.iter().zip(&flat).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn target_forward_matches_sequential_reference() {
    for attention in [AttentionPolicy::Dense, AttentionPolicy::streaming(3, 1)] {
        let spec = micro(3, 11).with_attention(attention);
        let p = ModelParams::<f64>::init(spec, Variant::Target, 32, 5).unwrap();
        let tokens = random_tokens(20, 11, 1);
        let (logits, trace) = forward_target(&p, &tokens).unwrap();
        let (ref_logits, ref_acts) = reference::target_forward(&p, &tokens);
        assert!(max_diff(&logits.data, &ref_logits) <= 1e-10);
        for (l, layer) in ref_acts.iter().enumerate() {
            assert!(max_diff(&trace.layers[l].data, layer) <= 1e-10);
        }
    }
}

#[test]
fn feedback_passes_match_sequential_reference() {
    let target = ModelParams::<f64>::init(micro(4, 11), Variant::Target, 32, 9).unwrap();
    for (kept, window, sink, k, len) in [(2, 5, 1, 4, 24), (2, 64, 0, 4, 12), (3, 3, 2, 3, 18), (1, 4, 1, 6, 12)] {
        let mut draft = prune_init(&target, kept, AttentionPolicy::streaming(window, sink), true, None).unwrap();
        perturb_mix(&mut draft, kept as u64 + window);
        for seed in 0..3 {
            let tokens = random_tokens(len, 11, seed);
            let (_, trace) = forward_target(&target, &tokens).unwrap();
            let fast = spire_train_forward(&tokens, &trace, &draft, k).unwrap();
            let slow = reference::feedback_forward(&draft, &tokens, &trace, k);
            let diff = max_diff(&fast.data, &slow);
            assert!(diff <= 1e-10, "kept {kept} window {window} k {k}: {diff:e}");
        }
    }
}

#[test]
fn single_layer_draft_reading_the_embedding_matches_reference() {
    let target = ModelParams::<f64>::init(micro(2, 11), Variant::Target, 32, 3).unwrap();
    let mut draft = prune_init(&target, 1, AttentionPolicy::streaming(4, 1), true, Some(0)).unwrap();
    let last = draft.tensors().len() - 1;
    draft.tensors_mut()[last].data = vec![40.0, 0.0];
    let tokens = random_tokens(16, 11, 4);
    let (_, trace) = forward_target(&target, &tokens).unwrap();
    let fast = spire_train_forward(&tokens, &trace, &draft, 4).unwrap();
    let slow = reference::feedback_forward(&draft, &tokens, &trace, 4);
    assert!(max_diff(&fast.data, &slow) <= 1e-10);
    // k = L leaves a single block: only the self-generated history is used.
    let whole = spire_train_forward(&tokens, &trace, &draft, 16).unwrap();
    assert!(max_diff(&whole.data, &reference::feedback_forward(&draft, &tokens, &trace, 16)) <= 1e-10);
}

#[test]
fn mixed_loss_gradients_match_finite_differences() {
    let teacher = ModelParams::<f64>::init(micro(3, 11), Variant::Target, 16, 21).unwrap();
    let mut draft = prune_init(&teacher, 2, AttentionPolicy::streaming(3, 1), true, None).unwrap();
    perturb_mix(&mut draft, 2);
    let batch: Vec<Vec<usize>> = (0..2).map(|s| random_tokens(9, 11, 30 + s)).collect();
    let cfg = TrainConfig {
        k: 4,
        omega: 0.5,
        loss: LossKind::Mixed,
        ..TrainConfig::default()
    };
    let err = gradcheck::max_relative_error(&draft, Some(&teacher), &batch, &cfg);
    assert!(err <= 1e-4, "max relative error {err:e}");
}

#[test]
fn target_and_vanilla_gradients_match_finite_differences() {
    let target = ModelParams::<f64>::init(micro(2, 11), Variant::Target, 16, 8).unwrap();
    let batch: Vec<Vec<usize>> = (0..2).map(|s| random_tokens(9, 11, 40 + s)).collect();
    let hard = TrainConfig {
        loss: LossKind::Hard,
        ..TrainConfig::default()
    };
    assert!(gradcheck::max_relative_error(&target, None, &batch, &hard) <= 1e-4);
    let teacher = ModelParams::<f64>::init(micro(3, 11), Variant::Target, 16, 9).unwrap();
    let vanilla = prune_init(&teacher, 2, AttentionPolicy::Dense, false, None).unwrap();
    assert!(gradcheck::max_relative_error(&vanilla, Some(&teacher), &batch, &TrainConfig::default()) <= 1e-4);
}

#[test]
fn feedback_decode_state_stays_bounded() {
    let n = 10_000;
    let target = ModelParams::<f32>::init(micro(3, 13), Variant::Target, n + 64, 2).unwrap();
    let draft = prune_init(&target, 2, AttentionPolicy::streaming(16, 1), true, None).unwrap();
    let rope = draft.rope();
    let mut state = SpireState::new(&draft).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut token = 0;
    for _ in 0..n {
        spire_decode_step(&mut state, token, &draft, &rope).unwrap();
        assert!(state.cached_positions() <= 17);
        token = rng.random_range(0..13);
    }
    assert_eq!(state.cached_positions(), 16);

    let context = random_tokens(8, 13, 3);
    let run = run_context(&target, DraftModel::Spire(&draft), &context, n, 4, &mut context_rng(5, 0)).unwrap();
    assert!(run.counts.iter().sum::<usize>() >= n);
    assert!(run.max_draft_state <= 17, "{}", run.max_draft_state);
}
