//! Cross-module invariants, checked on generated inputs.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use imagedpo_core::diffcore::{log_sigmoid, softmax};
use imagedpo_core::evalharness::{
    plural_equivalent, score_benchmark, BenchmarkRecord, Role, Setting, SynonymLexicon,
};
use imagedpo_core::imageops::{decode_pgm, encode_pgm, ImageGrid};
use imagedpo_core::objectives::discrete::{
    implied_reward, optimal_policy, partition_z, sample_case, verify_upper_bound, CaseShape,
};
use imagedpo_core::objectives::{image_dpo_loss, ImagePrefItem, RatioForm};
use imagedpo_core::policy::{forward, init_params, log_prob, AnswerId, PolicyDims};
use imagedpo_core::verification::random_image_items;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn swapped(items: &[ImagePrefItem]) -> Vec<ImagePrefItem> {
    items
        .iter()
        .map(|it| ImagePrefItem {
            img_good: it.img_bad.clone(),
            img_bad: it.img_good.clone(),
            ..it.clone()
        })
        .collect()
}

fn group(g: usize, answers: [&str; 3]) -> Vec<BenchmarkRecord> {
    answers
        .iter()
        .enumerate()
        .map(|(k, a)| BenchmarkRecord {
            id: format!("g{g}-{k}"),
            group_id: format!("g{g}"),
            question: "q".into(),
            fact: None,
            image: "x.pgm".into(),
            answer: a.to_string(),
            synonyms: vec![],
            role: if k == 0 { Role::Prior } else { Role::Test },
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_sigmoid_is_monotone_and_finite(x in -700.0f64..700.0, d in 0.0f64..5.0) {
        let a = log_sigmoid(x).unwrap();
        let b = log_sigmoid(x + d).unwrap();
        prop_assert!(a.is_finite() && a <= 0.0);
        prop_assert!(b >= a);
    }

    #[test]
    fn bound_holds_with_half_gradient_ratio(seed in any::<u64>(), bi in 0usize..3) {
        let beta = [0.1, 1.0, 5.0][bi];
        let case = sample_case(&mut rng(seed), beta, &CaseShape::default()).unwrap();
        let c = verify_upper_bound(&case.instance, &case.theta_tables, &case.pairs, &case.direction).unwrap();
        prop_assert!(c.holds, "lhs {} rhs {}", c.lhs, c.rhs);
        prop_assert!((c.grad_ratio - 0.5).abs() < 1e-9);
    }

    #[test]
    fn optimal_policy_round_trips_rewards(seed in any::<u64>(), beta in 0.05f64..6.0) {
        let case = sample_case(&mut rng(seed), beta, &CaseShape::default()).unwrap();
        let inst = &case.instance;
        for ctx in 0..inst.n_contexts() {
            let pi = optimal_policy(inst, ctx).unwrap();
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let z = partition_z(inst, ctx).unwrap();
            let r = implied_reward(&pi, inst.ref_row(ctx).unwrap(), beta, z).unwrap();
            for (a, b) in r.iter().zip(inst.reward_row(ctx).unwrap()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn image_loss_at_reference_is_ln2(seed in any::<u64>(), alpha in 0.01f64..50.0, raw in any::<bool>()) {
        let dims = PolicyDims::default();
        let theta = init_params(dims, seed).unwrap();
        let items = random_image_items(&mut rng(seed ^ 1), &dims, 5).unwrap();
        let form = if raw { RatioForm::Raw } else { RatioForm::Log };
        let r = image_dpo_loss(&theta, &theta, &items, alpha, form, false).unwrap();
        prop_assert_eq!(r.loss, LN_2);
    }

    #[test]
    fn swapping_images_negates_margins(seed in any::<u64>(), alpha in 0.1f64..5.0) {
        let dims = PolicyDims::default();
        let theta = init_params(dims, seed).unwrap();
        let reference = init_params(dims, seed.wrapping_add(1)).unwrap();
        let items = random_image_items(&mut rng(seed), &dims, 4).unwrap();
        let a = image_dpo_loss(&theta, &reference, &items, alpha, RatioForm::Log, false).unwrap();
        let b = image_dpo_loss(&theta, &reference, &swapped(&items), alpha, RatioForm::Log, false).unwrap();
        for (x, y) in a.per_example_margin.iter().zip(&b.per_example_margin) {
            prop_assert!((x + y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn policy_rows_are_distributions(seed in any::<u64>()) {
        let dims = PolicyDims::default();
        let theta = init_params(dims, seed).unwrap();
        let items = random_image_items(&mut rng(seed), &dims, 1).unwrap();
        let logp = forward(&theta, &items[0].q, &items[0].img_good).unwrap();
        let p = softmax(&logp).unwrap();
        let total: f64 = logp.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn permuted_answer_rows_relabel_probabilities(seed in any::<u64>()) {
        let dims = PolicyDims::default();
        let theta = init_params(dims, seed).unwrap();
        let mut perm: Vec<usize> = (0..dims.answer_vocab).collect();
        perm.shuffle(&mut rng(seed));
        let permuted = theta.permute_answers(&perm).unwrap();
        let item = &random_image_items(&mut rng(seed ^ 7), &dims, 1).unwrap()[0];
        for (i, &src) in perm.iter().enumerate() {
            let new = log_prob(&permuted, &item.q, &item.img_good, AnswerId(i)).unwrap();
            let old = log_prob(&theta, &item.q, &item.img_good, AnswerId(src)).unwrap();
            // the normalizer sums in a different order, so allow the last bits to differ
            prop_assert!((new - old).abs() <= 1e-12);
        }
    }

    #[test]
    fn pgm_round_trip_is_exact_on_the_byte_grid(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let img = ImageGrid::new(w, h, (0..w * h).map(|_| r.gen::<f64>()).collect()).unwrap().quantized();
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn plural_equivalence_is_symmetric(x in "[a-z]{1,8}", y in "[a-z]{1,8}") {
        prop_assert_eq!(plural_equivalent(&x, &y), plural_equivalent(&y, &x));
        let s = format!("{x}s");
        prop_assert!(plural_equivalent(&x, &s));
    }

    #[test]
    fn lexicon_acceptance_is_symmetric(
        pairs in proptest::collection::vec(("[a-z]{1,5}", "[a-z]{1,5}"), 0..12),
        a in "[a-z]{1,5}",
        b in "[a-z]{1,5}",
    ) {
        let lex = SynonymLexicon::from_pairs(pairs.iter().map(|(x, y)| (x.as_str(), y.as_str())));
        prop_assert_eq!(lex.accepts(&a, &b), lex.accepts(&b, &a));
        for (x, y) in &pairs {
            if x != y {
                prop_assert!(lex.accepts(x, y) && lex.accepts(y, x));
            }
        }
    }

    #[test]
    fn scoring_ignores_record_order_and_stays_in_range(
        seed in any::<u64>(),
        answers in proptest::collection::vec(0usize..3, 9),
    ) {
        let words = ["red", "blue", "green"];
        let mut records = vec![];
        for g in 0..3 {
            records.extend(group(g, ["red", "blue", "green"]));
        }
        let preds: BTreeMap<String, String> = records
            .iter()
            .zip(&answers)
            .map(|(r, k)| (r.id.clone(), words[*k].to_string()))
            .collect();
        let lex = SynonymLexicon::new();
        let a = score_benchmark(&records, &preds, Setting::P, &lex).unwrap();
        records.shuffle(&mut rng(seed));
        let b = score_benchmark(&records, &preds, Setting::P, &lex).unwrap();
        prop_assert_eq!((a.score, a.prior, a.instruction_failure_rate), (b.score, b.prior, b.instruction_failure_rate));
        for v in [a.score, a.prior, a.instruction_failure_rate] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }
}
