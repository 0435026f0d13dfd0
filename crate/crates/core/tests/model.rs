use lococo::cache::{PolicyConfig, PolicyKind};
use lococo::compressor::ReluPlacement;
use lococo::model::{
    evaluate, forward_full, forward_segmented, generate, perplexity, Checkpoint, ConvHeadSet, EvalConfig, ModelConfig,
    ModelWeights,
};
use lococo::numerics::Tensor2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> Checkpoint {
    let cfg = ModelConfig::with_dims(16, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Checkpoint::new(cfg, ModelWeights::init(&cfg, &mut rng))
}

fn with_heads(ck: &Checkpoint, policy: &PolicyConfig, k: usize, seed: u64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = policy.merge_capacity().unwrap();
    ck.with_conv_heads(ConvHeadSet::init(&ck.config, cap, k, ReluPlacement::PostConv, &mut rng).unwrap())
}

fn tokens(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..256)).collect()
}

#[test]
fn segmented_concat_matches_full_attention() {
    let ck = model(1);
    let toks = tokens(40, 2);
    let full = forward_full(&ck, &toks).unwrap();
    for b in [1, 3, 8, 40] {
        let (seg, trace) = forward_segmented(&ck, &toks, b, PolicyConfig::concat()).unwrap();
        assert!(seg.max_abs_diff(&full) < 1e-10, "B={b}");
        assert_eq!(trace.peak_live_entries(), 40);
    }
}

#[test]
fn lococo_fill_branch_matches_concat() {
    let ck = model(3);
    let toks = tokens(24, 4);
    let (concat, _) = forward_segmented(&ck, &toks, 6, PolicyConfig::concat()).unwrap();
    for kind in [PolicyKind::Lococo, PolicyKind::LococoSink, PolicyKind::LococoH2o] {
        let p = PolicyConfig::new(kind, 24);
        let ckh = with_heads(&ck, &p, 5, 5);
        let (out, _) = forward_segmented(&ckh, &toks, 6, p).unwrap();
        assert!(out.max_abs_diff(&concat) < 1e-12, "{kind}");
    }
}

#[test]
fn bounded_policies_hold_capacity() {
    let ck = model(5);
    let toks = tokens(48, 6);
    for kind in [
        PolicyKind::Lococo,
        PolicyKind::H2o,
        PolicyKind::SinkWindow,
        PolicyKind::LococoSink,
        PolicyKind::LococoH2o,
    ] {
        let p = PolicyConfig::new(kind, 12);
        let ckh = if kind.uses_conv_heads() {
            with_heads(&ck, &p, 3, 7)
        } else {
            ck.clone()
        };
        let (_, trace) = forward_segmented(&ckh, &toks, 4, p).unwrap();
        for r in trace.records() {
            let expected = r.tokens_seen.min(12);
            assert_eq!(r.live_entries, expected, "{kind} block {}", r.block);
            let cache_before = (r.tokens_seen - 4).min(12);
            assert_eq!(r.attn_entries, 4 * (cache_before + 4));
        }
    }
}

#[test]
fn causality_under_every_policy() {
    let ck = model(7);
    let a = tokens(32, 8);
    let mut b = a.clone();
    b[20] = (b[20] + 1) % 256;
    for kind in PolicyKind::ALL {
        let p = PolicyConfig::new(kind, 8);
        let ckh = if kind.uses_conv_heads() {
            with_heads(&ck, &p, 3, 9)
        } else {
            ck.clone()
        };
        let (la, _) = forward_segmented(&ckh, &a, 4, p).unwrap();
        let (lb, _) = forward_segmented(&ckh, &b, 4, p).unwrap();
        assert_eq!(la.slice_cols(0, 20), lb.slice_cols(0, 20), "{kind}");
        assert_ne!(la.slice_cols(20, 21), lb.slice_cols(20, 21), "{kind}");
    }
}

#[test]
fn out_of_vocab_token_is_rejected() {
    let ck = model(1);
    assert!(forward_segmented(&ck, &[1, 256], 1, PolicyConfig::concat()).is_err());
    assert!(forward_full(&ck, &[300]).is_err());
}

#[test]
fn lococo_without_heads_is_rejected() {
    let ck = model(1);
    let p = PolicyConfig::new(PolicyKind::Lococo, 8);
    assert!(forward_segmented(&ck, &[1, 2, 3], 1, p).is_err());
    let wrong = with_heads(&ck, &PolicyConfig::new(PolicyKind::Lococo, 4), 3, 1);
    assert!(forward_segmented(&wrong, &[1, 2, 3], 1, p).is_err());
}

fn greedy_full(ck: &Checkpoint, prompt: &[usize], n: usize) -> Vec<usize> {
    let mut out = prompt.to_vec();
    for _ in 0..n {
        let logits = forward_full(ck, &out).unwrap();
        out.push(logits.argmax_col(logits.cols() - 1));
    }
    out
}

#[test]
fn generation_matches_full_attention_greedy() {
    let ck = model(11);
    let prompt = tokens(9, 12);
    assert_eq!(generate(&ck, &prompt, 0, 4, PolicyConfig::concat()).unwrap(), prompt);
    let expected = greedy_full(&ck, &prompt, 6);
    assert_eq!(generate(&ck, &prompt, 6, 4, PolicyConfig::concat()).unwrap(), expected);
    let p = PolicyConfig::new(PolicyKind::Lococo, 15);
    let ckh = with_heads(&ck, &p, 3, 13);
    assert_eq!(generate(&ckh, &prompt, 6, 4, p).unwrap(), expected);
}

#[test]
fn generation_respects_context_limit() {
    let mut ck = model(1);
    ck.config.max_context = 8;
    assert!(generate(&ck, &[1, 2, 3], 6, 2, PolicyConfig::concat()).is_err());
    ck.config.interpolation_scale = 2.0;
    assert!(generate(&ck, &[1, 2, 3], 6, 2, PolicyConfig::concat()).is_ok());
}

#[test]
fn uniform_logits_give_vocab_perplexity() {
    let mut ck = model(1);
    ck.weights.embedding = Tensor2::zeros(16, 256);
    let cfg = EvalConfig {
        context_length: 10,
        block_size: 3,
    };
    let ppl = perplexity(&ck, &tokens(35, 1), &PolicyConfig::concat(), &cfg).unwrap();
    assert!((ppl - 256.0).abs() < 1e-9);
}

#[test]
fn perplexity_matches_scalar_oracle() {
    let ck = model(21);
    let corpus = tokens(50, 22);
    let cfg = EvalConfig {
        context_length: 16,
        block_size: 4,
    };
    let mut nll = 0.0;
    let mut n = 0;
    for w in corpus.chunks(16).filter(|w| w.len() >= 2) {
        let logits = forward_full(&ck, w).unwrap();
        for t in 0..w.len() - 1 {
            let col: Vec<f64> = (0..256).map(|r| logits.get(r, t)).collect();
            let lse = col.iter().map(|x| x.exp()).sum::<f64>().ln();
            nll += lse - col[w[t + 1]];
            n += 1;
        }
    }
    let s = evaluate(&ck, &corpus, &PolicyConfig::concat(), &cfg).unwrap();
    assert_eq!(s.predictions, n);
    assert!((s.mean_nll - nll / n as f64).abs() < 1e-10);
}

#[test]
fn empty_corpus_is_rejected() {
    let cfg = EvalConfig {
        context_length: 8,
        block_size: 2,
    };
    assert!(perplexity(&model(1), &[], &PolicyConfig::concat(), &cfg).is_err());
}

#[test]
fn stripped_checkpoint_restores_concat_outputs() {
    let ck = model(31);
    let p = PolicyConfig::new(PolicyKind::Lococo, 8);
    let calibrated = with_heads(&ck, &p, 5, 32);
    let stripped = Checkpoint::from_bytes(&calibrated.without_conv_heads().to_bytes().unwrap()).unwrap();
    assert_eq!(stripped.to_bytes().unwrap(), ck.to_bytes().unwrap());
    let toks = tokens(20, 33);
    let (a, _) = forward_segmented(&ck, &toks, 4, PolicyConfig::concat()).unwrap();
    let (b, _) = forward_segmented(&stripped, &toks, 4, PolicyConfig::concat()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = with_heads(&model(41), &PolicyConfig::new(PolicyKind::LococoSink, 10), 3, 42);
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
}
