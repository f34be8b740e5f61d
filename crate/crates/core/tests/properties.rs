use proptest::prelude::*;

use calm_core::anchors::{entropy, text_anchor_distribution, AnchorSet, Temperature, TextFeatures, DEFAULT_TEMPLATE};
use calm_core::cvae::{kl_loss, rec_loss_probs};
use calm_core::optim::{adamw_step, AdamWState, OptimConfig};
use calm_core::retrieval::{rank_of_truth, recall_at_k, top_k, RetrievalMetrics, SimilarityMatrix};
use calm_core::store::{decode_store, encode_store, Dtype};
use calm_core::synth::{synthesize, SyntheticConfig};
use calm_core::tensor::{ParamStore, Tensor};

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d).prop_filter("nonzero norm", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

/// `(anchors as rows, feature)` with a shared width.
fn anchor_problem() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..10, 1usize..8).prop_flat_map(|(k, d)| (prop::collection::vec(nonzero_vec(d), k), nonzero_vec(d)))
}

fn anchor_set(rows: &[Vec<f64>]) -> AnchorSet {
    let k = rows.len();
    let d = rows[0].len();
    let flat = rows.iter().flatten().copied().collect();
    let labels = (0..k).map(|i| format!("a{i}")).collect();
    AnchorSet::new(Tensor::matrix(k, d, flat).unwrap(), labels, DEFAULT_TEMPLATE).unwrap()
}

fn probs_of(rows: &[Vec<f64>], feature: &[f64], tau: f64) -> Vec<f64> {
    let text = TextFeatures::new(feature.to_vec()).unwrap();
    text_anchor_distribution(&text, &anchor_set(rows), &Temperature::fixed(tau).unwrap())
        .unwrap()
        .probs()
        .to_vec()
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn square_scores() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| (Just(n), prop::collection::vec(-5.0f64..5.0, n * n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn anchor_distribution_is_a_distribution((rows, f) in anchor_problem(), tau in 0.05f64..50.0) {
        let p = probs_of(&rows, &f, tau);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn feature_scale_does_not_matter((rows, f) in anchor_problem(), c in 1e-3f64..1e3, tau in 0.1f64..20.0) {
        let a = probs_of(&rows, &f, tau);
        let scaled: Vec<f64> = f.iter().map(|x| x * c).collect();
        let b = probs_of(&rows, &scaled, tau);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn permuting_anchors_permutes_probabilities((rows, f) in anchor_problem(), seed in any::<u64>()) {
        let mut r = calm_core::rng::stream(seed, calm_core::rng::Stream::Check);
        let perm = calm_core::rng::permutation(&mut r, rows.len());
        let base = probs_of(&rows, &f, 5.0);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let moved = probs_of(&shuffled, &f, 5.0);
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!((moved[i] - base[src]).abs() <= 1e-12);
        }
    }

    #[test]
    fn sharper_temperature_never_lowers_the_peak((rows, f) in anchor_problem(), t1 in 0.1f64..20.0, dt in 0.0f64..20.0) {
        let peak = |p: Vec<f64>| p.into_iter().fold(0.0, f64::max);
        prop_assert!(peak(probs_of(&rows, &f, t1 + dt)) >= peak(probs_of(&rows, &f, t1)) - 1e-12);
    }

    #[test]
    fn reconstruction_loss_is_bounded_by_entropy(target in simplex(7), recon in simplex(7)) {
        let h = entropy(&target);
        prop_assert!(rec_loss_probs(&target, &recon).unwrap() >= h - 1e-12);
        prop_assert!((rec_loss_probs(&target, &target).unwrap() - h).abs() <= 1e-8);
    }

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 1..10), seed in any::<u64>()) {
        let mut r = calm_core::rng::stream(seed, calm_core::rng::Stream::Check);
        let lv: Vec<f64> = calm_core::rng::normals(&mut r, mu.len());
        prop_assert!(kl_loss(&mu, &lv).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_ignore_monotone_rescaling((n, s) in square_scores(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let sim = SimilarityMatrix::diagonal(Tensor::matrix(n, n, s.clone()).unwrap()).unwrap();
        let warped: Vec<f64> = s.iter().map(|x| (a * x + b).tanh() + x.exp()).collect();
        let sim2 = SimilarityMatrix::diagonal(Tensor::matrix(n, n, warped).unwrap()).unwrap();
        prop_assert_eq!(rank_of_truth(&sim), rank_of_truth(&sim2));
    }

    #[test]
    fn recall_grows_with_cutoff((n, s) in square_scores()) {
        let sim = SimilarityMatrix::diagonal(Tensor::matrix(n, n, s).unwrap()).unwrap();
        let ranks = rank_of_truth(&sim);
        let mut prev = 0.0;
        for k in 1..=n {
            let r = recall_at_k(&ranks, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 100.0);
    }

    #[test]
    fn extra_distractor_columns((n, s) in square_scores()) {
        let sim = SimilarityMatrix::diagonal(Tensor::matrix(n, n, s.clone()).unwrap()).unwrap();
        let before = rank_of_truth(&sim);
        let widen = |fill: f64| {
            let mut data = Vec::with_capacity(n * (n + 1));
            for q in 0..n {
                data.extend_from_slice(&s[q * n..(q + 1) * n]);
                data.push(fill);
            }
            SimilarityMatrix::new(Tensor::matrix(n, n + 1, data).unwrap(), (0..n).collect()).unwrap()
        };
        prop_assert_eq!(rank_of_truth(&widen(-100.0)), before.clone());
        let strong: Vec<usize> = before.iter().map(|r| r + 1).collect();
        prop_assert_eq!(rank_of_truth(&widen(100.0)), strong);
        let weak = RetrievalMetrics::evaluate(&widen(-100.0)).unwrap();
        let base = RetrievalMetrics::evaluate(&sim).unwrap();
        prop_assert!(weak.r1 >= base.r1);
        let worse = RetrievalMetrics::evaluate(&widen(100.0)).unwrap();
        prop_assert!(worse.r1 <= base.r1 && worse.r5 <= base.r5 && worse.r10 <= base.r10);
    }

    #[test]
    fn top_k_matches_a_full_sort(p in simplex(9), k in 1usize..10) {
        let labels: Vec<String> = (0..9).map(|i| format!("l{i}")).collect();
        let got = top_k(&p, &labels, k).unwrap();
        let mut order: Vec<usize> = (0..9).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        let want: Vec<(String, f64)> = order.into_iter().take(k).map(|i| (labels[i].clone(), p[i])).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn store_round_trip_is_bitwise(rows in 0usize..6, dim in 1usize..6, seed in any::<u64>()) {
        let mut r = calm_core::rng::stream(seed, calm_core::rng::Stream::Check);
        let data: Vec<f64> = calm_core::rng::normals(&mut r, rows * dim).into_iter().map(|v| (v * 1e3) as f32 as f64).collect();
        let m = Tensor::matrix(rows, dim, data).unwrap();
        let bytes = encode_store(&m, Dtype::F32).unwrap();
        prop_assert_eq!(bytes.len(), 28 + 4 * rows * dim);
        let back = decode_store(&bytes).unwrap();
        prop_assert_eq!(encode_store(&back, Dtype::F32).unwrap(), bytes);
    }

    #[test]
    fn adamw_fixed_point(theta in -10.0f64..10.0, lr in 1e-5f64..1.0) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(theta).with_grad());
        store.get_mut(id).accumulate_grad(&[0.0]).unwrap();
        let mut st = AdamWState::new(&store);
        let cfg = OptimConfig { lr, weight_decay: 0.0, ..OptimConfig::default() };
        adamw_step(&mut store, &mut st, &cfg).unwrap();
        prop_assert_eq!(store.get(id).item(), theta);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_data_depends_only_on_seed(seed in any::<u64>(), keep in 1usize..=6) {
        let cfg = SyntheticConfig {
            n_classes: 3,
            samples_per_class: 5,
            dim: 6,
            imbalance_keep: keep,
            ..SyntheticConfig::default()
        };
        prop_assert_eq!(synthesize(&cfg, seed).unwrap(), synthesize(&cfg, seed).unwrap());
    }

    #[test]
    fn keep_beyond_dim_is_rejected(dim in 1usize..20, extra in 1usize..5) {
        let cfg = SyntheticConfig { dim, imbalance_keep: dim + extra, ..SyntheticConfig::default() };
        let err = cfg.validate().unwrap_err();
        prop_assert_eq!(err.exit_code(), 2);
    }
}
