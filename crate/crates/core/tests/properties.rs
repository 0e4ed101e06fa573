use noesis::attack::{auc, roc_curve, tpr_at_fpr};
use noesis::checkpoint::{self, CheckpointMeta};
use noesis::corpus::{
    generate_synthetic_corpus, sample_epoch_blocks, split_train_test_counts, SyntheticSpec, BOS, EOS, FIRST_KEYWORD,
};
use noesis::eval::bridge_fraction;
use noesis::model::{ExpertSet, Model, ModelConfig};
use noesis::optim::lr_at;
use noesis::privacy::{clip_per_sample, epsilon_spent, noisy_aggregate, rdp_subsampled_gaussian};
use noesis::seed::derive_seed;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Probability that a random member outscores a random non-member, ties
/// counting one half.
fn pairwise_auc(m: &[f64], n: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in m {
        for b in n {
            s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    s / (m.len() * n.len()) as f64
}

// Small integer scores so ties are common.
fn tied_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..12).prop_map(f64::from), 1..max_len)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(m in tied_scores(40), n in tied_scores(40)) {
        let a = auc(&roc_curve(&m, &n).unwrap());
        prop_assert!((a - pairwise_auc(&m, &n)).abs() < 1e-12);
        let swapped = auc(&roc_curve(&n, &m).unwrap());
        prop_assert!((a + swapped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone_and_ends_at_one(m in tied_scores(30), n in tied_scores(30)) {
        let curve = roc_curve(&m, &n).unwrap();
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let mut prev = 0.0;
        for target in [0.001, 0.01, 0.1, 0.5, 0.999] {
            let t = tpr_at_fpr(&curve, target).unwrap();
            prop_assert!((0.0..=1.0).contains(&t) && t >= prev);
            prev = t;
        }
    }

    #[test]
    fn auc_ignores_monotone_rescaling(m in tied_scores(30), n in tied_scores(30), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let f = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let base = auc(&roc_curve(&m, &n).unwrap());
        let moved = auc(&roc_curve(&f(&m), &f(&n)).unwrap());
        prop_assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        grads in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..20), 1..12),
        clip in 0.01f64..20.0,
    ) {
        let mut clipped = grads.clone();
        let norms = clip_per_sample(&mut clipped, clip).unwrap();
        for ((g, c), norm) in grads.iter().zip(&clipped).zip(&norms) {
            prop_assert!((l2(g) - norm).abs() <= 1e-12 * norm.max(1.0));
            prop_assert!(l2(c) <= clip * (1.0 + 1e-12));
            if *norm <= clip {
                prop_assert_eq!(g, c);
            } else {
                let s = clip / norm;
                for (x, y) in g.iter().zip(c) {
                    prop_assert!((x * s - y).abs() <= 1e-12 * clip);
                }
            }
        }
    }

    #[test]
    fn zero_noise_aggregate_is_the_mean_over_nominal_batch(
        grads in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 1..8),
        extra in 0usize..4,
        seed: u64,
    ) {
        let batch = grads.len() + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = noisy_aggregate(&grads, 0.0, 1.0, batch, &mut rng).unwrap();
        for (j, v) in out.iter().enumerate() {
            let want = grads.iter().map(|g| g[j]).sum::<f64>() / batch as f64;
            prop_assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bridge_fraction_is_affine_invariant(
        n in 0.0f64..1.0, s in 0.0f64..1.0, p in 0.0f64..1.0, a in 0.1f64..10.0, b in -1.0f64..1.0,
    ) {
        let base = bridge_fraction(n, s, p);
        let moved = bridge_fraction(a * n + b, a * s + b, a * p + b);
        match (base, moved) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-6 * x.abs().max(1.0)),
            (None, None) => {}
            // A gap this small can flip sign under rounding.
            _ => prop_assert!((p - s).abs() < 1e-12),
        }
        prop_assert_eq!(bridge_fraction(s, s, p).map(|f| f == 0.0), (p > s).then_some(true));
        prop_assert_eq!(bridge_fraction(p, s, p).map(|f| (f - 1.0).abs() < 1e-12), (p > s).then_some(true));
    }

    #[test]
    fn lr_schedule_stays_in_range(eta in 1e-5f64..1.0, warmup in 0u64..50, extra in 0u64..500, t in 1u64..600) {
        let total = warmup + extra;
        let lr = lr_at(eta, t, warmup, total);
        prop_assert!((0.0..=eta * (1.0 + 1e-12)).contains(&lr));
        if warmup > 0 {
            prop_assert!((lr_at(eta, warmup, warmup, total) - eta).abs() < 1e-15);
        }
        if t >= total && total > warmup {
            prop_assert_eq!(lr, 0.0);
        }
    }

    #[test]
    fn rdp_grows_with_q_and_shrinks_with_sigma(
        q in 0.001f64..0.5, dq in 0.001f64..0.4, sigma in 0.6f64..4.0, ds in 0.05f64..2.0, alpha in 2u32..40,
    ) {
        let alpha = f64::from(alpha);
        let base = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!(rdp_subsampled_gaussian((q + dq).min(1.0), sigma, alpha).unwrap() >= base * (1.0 - 1e-9));
        prop_assert!(rdp_subsampled_gaussian(q, sigma + ds, alpha).unwrap() <= base * (1.0 + 1e-9));
        // Never worse than the unsubsampled mechanism.
        prop_assert!(base <= alpha / (2.0 * sigma * sigma) * (1.0 + 1e-9));
    }

    #[test]
    fn epsilon_grows_with_steps(q in 0.005f64..0.1, sigma in 0.7f64..3.0, steps in 1u64..2000, more in 1u64..2000) {
        let (e1, _) = epsilon_spent(q, sigma, steps, 1e-5).unwrap();
        let (e2, _) = epsilon_spent(q, sigma, steps + more, 1e-5).unwrap();
        prop_assert!(e1 > 0.0 && e2 >= e1 * (1.0 - 1e-12));
    }

    #[test]
    fn derived_seeds_are_deterministic(base: u64, a in "[a-z/0-9]{1,12}", b in "[a-z/0-9]{1,12}") {
        prop_assert_eq!(derive_seed(base, &a), derive_seed(base, &a));
        if a != b {
            prop_assert_ne!(derive_seed(base, &a), derive_seed(base, &b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_documents_use_only_their_domain_keywords(
        docs in prop::collection::vec(2usize..12, 2..4), seed: u64,
    ) {
        let spec = SyntheticSpec::new(docs.clone(), seed);
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        prop_assert_eq!(&corpus, &generate_synthetic_corpus(&spec).unwrap());
        for (k, &n) in docs.iter().enumerate() {
            prop_assert_eq!(corpus.documents.iter().filter(|d| d.domain == k).count(), n);
        }
        let shared = spec.shared_pool();
        for d in &corpus.documents {
            prop_assert_eq!(d.tokens.first(), Some(&BOS));
            prop_assert_eq!(d.tokens.last(), Some(&EOS));
            let private = spec.private_pool(d.domain);
            for t in d.tokens.iter().filter(|t| **t >= FIRST_KEYWORD) {
                prop_assert!(shared.contains(t) || private.contains(t), "token {} in domain {}", t, d.domain);
            }
        }
    }

    #[test]
    fn epoch_blocks_cover_every_training_document_once(seed: u64, epoch in 0usize..5, len in 2usize..40) {
        let corpus = generate_synthetic_corpus(&SyntheticSpec::new(vec![6, 5, 4], 11)).unwrap();
        let corpus = split_train_test_counts(&corpus, &[1, 1, 1], 12).unwrap();
        let blocks = sample_epoch_blocks(&corpus, len, seed, epoch).unwrap();
        prop_assert_eq!(&blocks, &sample_epoch_blocks(&corpus, len, seed, epoch).unwrap());
        let mut ids: Vec<u64> = blocks.iter().map(|b| b.source_doc_id).collect();
        ids.sort_unstable();
        let mut want: Vec<u64> = corpus.train_docs().map(|d| d.id).collect();
        want.sort_unstable();
        prop_assert_eq!(ids, want);
        for b in &blocks {
            prop_assert_eq!(b.len(), len);
            let real = b.real_len();
            prop_assert!(b.pad_mask[real..].iter().all(|m| !m));
            let doc = corpus.get(b.source_doc_id).unwrap();
            prop_assert!(doc.tokens.windows(real).any(|w| w == b.real_tokens()));
        }
    }

    #[test]
    fn checkpoints_round_trip(seed: u64, n_pt in 0usize..3, rc in 0usize..3, domain in 0usize..3) {
        let cfg = ModelConfig {
            d_model: 8, d_ff: 12, n_layers: 1, n_heads: 2, vocab_size: 24, context_length: 8,
            n_pt, num_domains: 3, rank: 2, common_rank: rc, alpha: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::<f32>::init(cfg.clone(), &mut rng).unwrap();
        model.init_prompts(&mut rng);
        model.experts = Some(ExpertSet::init_experts(&cfg, &mut rng));
        let meta = CheckpointMeta::new(cfg, "stage2", seed, 0);
        let bytes = checkpoint::encode(&meta, &model).unwrap();
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&checkpoint::encode(&back.meta, &back.model).unwrap(), &bytes);
        let tokens = [1u32, 9, 4, 17, 2];
        prop_assert_eq!(
            back.model.sequence_log_likelihood(domain, &tokens).unwrap(),
            model.sequence_log_likelihood(domain, &tokens).unwrap()
        );
        let deployed = back.deploy(domain).unwrap();
        let merged = deployed.model.sequence_log_likelihood(domain, &tokens).unwrap();
        let routed = model.sequence_log_likelihood(domain, &tokens).unwrap();
        prop_assert!((merged - routed).abs() < 1e-4, "{} vs {}", merged, routed);
    }
}
