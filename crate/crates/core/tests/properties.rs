use lococo::cache::{
    heavy_hitter_keep_set, update_concat, update_h2o, HeavyHitterConfig, KvCache, PolicyConfig, PolicyKind,
};
use lococo::compressor::{fuse, synthesize_weights, ConvHead, FusionWeights, ReluPlacement};
use lococo::numerics::conv::conv1d;
use lococo::numerics::tensor::{matmul, matmul_serial, row_normalize, softmax_cols};
use lococo::numerics::Tensor2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_head(d: usize, m: usize, k: usize, spread: f64, relu: ReluPlacement, r: &mut ChaCha8Rng) -> ConvHead {
    let weight = Tensor2::randn(m, 2 * d * k, spread, r);
    let bias = Tensor2::randn(m, 1, 1.0, r);
    ConvHead::new(weight, bias, k, relu, 0).unwrap()
}

/// Keys tagged by token index in every row; values are the negated keys.
fn tagged(d: usize, first: usize, b: usize) -> (Tensor2, Tensor2) {
    let k = Tensor2::from_fn(d, b, |r, j| (first + j) as f64 + 0.01 * r as f64);
    let v = k.scale(-1.0);
    (k, v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_columns_sum_to_one_and_ignore_shifts(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..6, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let mut x = Tensor2::randn(rows, cols, 3.0, &mut r);
        for c in 0..cols {
            for row in 0..rows {
                if row > 0 && r.gen_bool(0.3) {
                    x.set(row, c, f64::NEG_INFINITY);
                }
            }
        }
        let p = softmax_cols(&x).unwrap();
        for c in 0..cols {
            let s: f64 = p.col(c).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_cols(&x.map(|v| v + shift)).unwrap();
        prop_assert!(shifted.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn parallel_matmul_is_bit_identical_to_serial(seed in any::<u64>(), n in 1usize..40, k in 1usize..40, m in 1usize..40) {
        let mut r = rng(seed);
        let a = Tensor2::randn(n, k, 1.0, &mut r);
        let b = Tensor2::randn(k, m, 1.0, &mut r);
        let p = matmul(&a, &b).unwrap();
        prop_assert_eq!(&p, &matmul_serial(&a, &b).unwrap());
        for i in 0..n {
            for j in 0..m {
                let naive: f64 = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
                prop_assert!((p.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum(seed in any::<u64>(), c_in in 1usize..4, c_out in 1usize..4, t in 1usize..10, half in 0usize..3) {
        let k = 2 * half + 1;
        let mut r = rng(seed);
        let x = Tensor2::randn(c_in, t, 1.0, &mut r);
        let w = Tensor2::randn(c_out, c_in * k, 1.0, &mut r);
        let y = conv1d(&x, &w, k).unwrap();
        for o in 0..c_out {
            for p in 0..t {
                let mut s = 0.0;
                for c in 0..c_in {
                    for j in 0..k {
                        let src = p as i64 + j as i64 - half as i64;
                        if (0..t as i64).contains(&src) {
                            s += w.get(o, c * k + j) * x.get(c, src as usize);
                        }
                    }
                }
                prop_assert!((y.get(o, p) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_normalize_is_stochastic(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut r = rng(seed);
        let x = Tensor2::uniform(rows, cols, 0.0, 2.0, &mut r).map(|v| if v < 0.6 { 0.0 } else { v });
        let (y, floored) = row_normalize(&x);
        for (i, &f) in floored.iter().enumerate() {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert_eq!(f, x.row(i).iter().sum::<f64>() < 1e-8);
        }
    }

    #[test]
    fn fusion_is_row_stochastic_and_convex(seed in any::<u64>(), d in 1usize..4, m in 1usize..6, b in 1usize..5, c in 0usize..6, pre in any::<bool>()) {
        let mut r = rng(seed);
        let relu = if pre { ReluPlacement::PreConv } else { ReluPlacement::PostConv };
        let head = random_head(d, m, 3, 1.0, relu, &mut r);
        let k_n = Tensor2::randn(d, b, 1.0, &mut r);
        let v_n = Tensor2::randn(d, b, 1.0, &mut r);
        let k_c = Tensor2::randn(d, c, 1.0, &mut r);
        let v_c = Tensor2::randn(d, c, 1.0, &mut r);
        let fw = synthesize_weights(&k_n, &v_n, &k_c, &v_c, &head).unwrap();
        let joined = fw.joined().unwrap();
        for i in 0..m {
            let s: f64 = joined.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(joined.row(i).iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
        let (keys, values) = fuse(&fw, &k_n, &v_n, &k_c, &v_c).unwrap();
        let all_k = k_n.hcat(&k_c).unwrap();
        let all_v = v_n.hcat(&v_c).unwrap();
        for (out, src) in [(&keys, &all_k), (&values, &all_v)] {
            for row in 0..d {
                let lo = src.row(row).iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = src.row(row).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for &x in out.row(row) {
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn bounded_policies_keep_capacity_and_kv_pairing(seed in any::<u64>(), kind_ix in 0usize..6, cap in 4usize..12, b in 1usize..5, blocks in 1usize..8) {
        let kind = PolicyKind::ALL[kind_ix];
        let mut r = rng(seed);
        let policy = PolicyConfig { n_sink: 2, hybrid_heavy: 2, ..PolicyConfig::new(kind, cap) };
        prop_assume!(policy.validate(b).is_ok());
        let d = 3;
        let head = policy
            .merge_capacity()
            .map(|mc| random_head(d, mc, 3, 0.5, ReluPlacement::PostConv, &mut r));
        let mut cache = KvCache::new(d);
        for blk in 0..blocks {
            let (k, v) = tagged(d, blk * b, b);
            let probs = softmax_cols(&Tensor2::randn(cache.len() + b, b, 1.0, &mut r)).unwrap();
            cache = policy.update(&cache, &k, &v, Some(&probs), head.as_ref()).unwrap();
            let seen = (blk + 1) * b;
            prop_assert_eq!(cache.tokens_seen(), seen);
            if kind.is_bounded() {
                prop_assert!(cache.len() <= cap);
                if seen >= cap {
                    prop_assert_eq!(cache.len(), cap);
                }
            } else {
                prop_assert_eq!(cache.len(), seen);
            }
            // Keys and values are transformed by the same weights.
            prop_assert!(cache.values().max_abs_diff(&cache.keys().scale(-1.0)) < 1e-12);
        }
    }

    #[test]
    fn sink_window_keeps_first_and_latest(seed in any::<u64>(), n_sink in 0usize..4, window in 1usize..6, b in 1usize..4, blocks in 1usize..8) {
        let _ = seed;
        let policy = PolicyConfig { n_sink, ..PolicyConfig::new(PolicyKind::SinkWindow, n_sink + window) };
        let mut cache = KvCache::new(1);
        for blk in 0..blocks {
            let (k, v) = tagged(1, blk * b, b);
            cache = policy.update(&cache, &k, &v, None, None).unwrap();
        }
        let seen = blocks * b;
        let expected: Vec<usize> = if seen <= n_sink + window {
            (0..seen).collect()
        } else {
            (0..n_sink).chain(seen - window..seen).collect()
        };
        prop_assert_eq!(cache.token_positions(), expected);
    }

    #[test]
    fn keep_set_has_recent_and_best_scores(seed in any::<u64>(), n in 1usize..20, recent in 0usize..6, heavy in 0usize..6) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0..5) as f64) * 0.5).collect();
        let keep = heavy_hitter_keep_set(&scores, recent, heavy);
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        if recent + heavy >= n {
            prop_assert_eq!(keep.len(), n);
        } else {
            prop_assert_eq!(keep.len(), recent + heavy);
            for i in n - recent..n {
                prop_assert!(keep.contains(&i));
            }
            // No evicted older column beats a kept older column.
            let kept_old: Vec<usize> = keep.iter().copied().filter(|&i| i < n - recent).collect();
            for i in 0..n - recent {
                if !keep.contains(&i) {
                    for &j in &kept_old {
                        prop_assert!(scores[i] < scores[j] || (scores[i] == scores[j] && i < j));
                    }
                }
            }
        }
    }
}

#[test]
fn h2o_is_a_one_hot_fusion() {
    let mut r = rng(5);
    for case in 0..100 {
        let d = r.gen_range(1..5);
        let cap = r.gen_range(2..10);
        let b = r.gen_range(1..=cap);
        let cfg = HeavyHitterConfig::split(cap, 0.5).unwrap();
        let mut cache = KvCache::new(d);
        let mut scores: Vec<f64> = Vec::new();
        for _ in 0..r.gen_range(1..4) {
            let k = Tensor2::randn(d, b, 1.0, &mut r);
            let v = Tensor2::randn(d, b, 1.0, &mut r);
            let probs = softmax_cols(&Tensor2::randn(cache.len() + b, b, 1.0, &mut r)).unwrap();
            let next = update_h2o(&cache, &k, &v, &probs, &cfg).unwrap();

            scores.extend(std::iter::repeat_n(0.0, b));
            for (row, s) in scores.iter_mut().enumerate() {
                *s += probs.row(row).iter().sum::<f64>();
            }
            let n = scores.len();
            let keep: Vec<usize> = if n <= cap {
                (0..n).collect()
            } else {
                heavy_hitter_keep_set(&scores, cfg.recent_budget, cfg.heavy_budget)
            };
            let fw = FusionWeights::one_hot(&keep, cache.len(), b);
            let (fk, fv) = fuse(&fw, &k, &v, cache.keys(), cache.values()).unwrap();
            assert_eq!(&fk, next.keys(), "case {case}");
            assert_eq!(&fv, next.values(), "case {case}");
            scores = keep.iter().map(|&i| scores[i]).collect();
            cache = next;
        }
    }
}

#[test]
fn concat_cache_is_plain_append() {
    let (k, v) = tagged(2, 0, 3);
    let c = update_concat(&KvCache::new(2), &k, &v).unwrap();
    assert_eq!(c.keys(), &k);
}
