use mars_core::dataset::{sample_negative, Interaction, InteractionDataset, Triplet};
use mars_core::eval::{ndcg_at, rank_of, sample_eval_negatives, EvalReport, UserRank};
use mars_core::linalg;
use mars_core::optim::{calibration_multiplier, max_ball_violation, projected_sgd_step};
use mars_core::rng::seeded;
use mars_core::{
    calibrated_rsgd_step, compute_adaptive_margins, cross_facet_similarity, evaluate, init_params,
    leave_one_out_split, score_items, total_loss_gradients, user_sampling_distribution, EvalProtocol,
    EvalTarget, LossConfig, OptimConfig, Variant,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn spherical_similarity_ignores_row_scale(seed in any::<u64>(), scale in 1e-3f64..1e3, user_side in any::<bool>()) {
        let mut p = init_params(3, 4, 6, 3, Variant::Mars, seed).unwrap();
        let mut rng = seeded(seed ^ 1);
        for x in p.facet_logits.as_mut_slice() {
            *x = rng.gen_range(-2.0..2.0);
        }
        let (u, v) = (rng.gen_range(0..3), rng.gen_range(0..4));
        let before = cross_facet_similarity(&p, u, v).unwrap();
        let row = if user_side { p.user_emb.row_mut(u) } else { p.item_emb.row_mut(v) };
        linalg::scale(scale, row);
        let after = cross_facet_similarity(&p, u, v).unwrap();
        prop_assert!((before - after).abs() <= 1e-12, "{before} vs {after}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // With one facet the mixing weight is one and g is the plain facet score.
    #[test]
    fn single_facet_score_is_facet_similarity(seed in any::<u64>()) {
        let p = init_params(2, 3, 4, 1, Variant::Mar, seed).unwrap();
        let u = p.user_facets(1);
        let v = p.item_facets(2);
        let d: f64 = u.facet(0).iter().zip(v.facet(0)).map(|(a, b)| (a - b) * (a - b)).sum();
        let g = cross_facet_similarity(&p, 1, 2).unwrap();
        prop_assert!((g + d).abs() < 1e-12);
    }
}

#[test]
fn rsgd_keeps_rows_on_sphere() {
    let mut rng = seeded(11);
    let cfg = OptimConfig::new(0.3);
    let mut x = gaussian(&mut rng, 16);
    linalg::scale(1.0 / linalg::norm(&x), &mut x);
    for step in 0..1000 {
        let mut g = gaussian(&mut rng, 16);
        linalg::scale(10f64.powi(rng.gen_range(-3..3)), &mut g);
        let m = calibration_multiplier(&x, &g);
        assert!((0.0..=2.0).contains(&m), "step {step}: multiplier {m}");
        x = calibrated_rsgd_step(&x, &g, &cfg).unwrap();
        assert!((linalg::norm(&x) - 1.0).abs() <= 1e-9, "step {step}");
    }
}

#[test]
fn projected_sgd_stays_in_ball() {
    let (n, m) = (20, 30);
    let mut rng = seeded(5);
    let mut params = init_params(n, m, 6, 3, Variant::Mar, 5).unwrap();
    let ds = InteractionDataset::new(
        n,
        m,
        (0..n).flat_map(|u| (0..m).filter(move |v| (u + v) % 3 == 0).map(move |v| Interaction::new(u, v))).collect(),
    )
    .unwrap();
    let margins = compute_adaptive_margins(&ds);
    let loss = LossConfig::default();
    let cfg = OptimConfig::new(0.5);
    for step in 0..500 {
        let batch: Vec<Triplet> = (0..8)
            .map(|_| {
                let user = rng.gen_range(0..n);
                let items = ds.items_of_user(user);
                let pos = items[rng.gen_range(0..items.len())];
                Triplet { user, pos, neg: sample_negative(items, m, &mut rng) }
            })
            .collect();
        let (_, grads) = total_loss_gradients(&params, &batch, &margins, &loss).unwrap();
        projected_sgd_step(&mut params, &grads, &cfg).unwrap();
        for t in &batch {
            assert!(params.user_facets(t.user).max_norm() <= 1.0 + 1e-9, "step {step}");
            assert!(params.item_facets(t.pos).max_norm() <= 1.0 + 1e-9, "step {step}");
            assert!(params.item_facets(t.neg).max_norm() <= 1.0 + 1e-9, "step {step}");
        }
    }
    // rows never touched keep their initial norms, which may exceed one
    let _ = max_ball_violation(&params);
}

#[test]
fn user_sampling_matches_power_law() {
    let n = 100;
    let freqs: Vec<usize> = (0..n).map(|u| 1 + (u * 37) % 50).collect();
    let mut pairs = Vec::new();
    for (u, &f) in freqs.iter().enumerate() {
        pairs.extend((0..f).map(|v| Interaction::new(u, v)));
    }
    let ds = InteractionDataset::new(n, 60, pairs).unwrap();
    let dist = user_sampling_distribution(&ds, 0.8).unwrap();
    let z: f64 = freqs.iter().map(|&f| (f as f64).powf(0.8)).sum();
    for (u, &f) in freqs.iter().enumerate() {
        assert!((dist[u] - (f as f64).powf(0.8) / z).abs() < 1e-12);
    }
}

#[test]
fn negatives_never_hit_positives() {
    let mut rng = seeded(3);
    for u in 0..50usize {
        // densities from 2% to 98%, never saturated
        let positives: Vec<usize> = (0..50).filter(|v| (u * 17 + v * 29) % 50 < u.clamp(1, 49)).collect();
        for _ in 0..2000 {
            let q = sample_negative(&positives, 50, &mut rng);
            assert!(q < 50 && positives.binary_search(&q).is_err());
        }
    }
    // the complement scan is reached when almost every item is positive
    let crowded: Vec<usize> = (0..50).filter(|&v| v != 17).collect();
    for _ in 0..100 {
        assert_eq!(sample_negative(&crowded, 50, &mut rng), 17);
    }
}

#[test]
fn metrics_match_sorting_reference() {
    // fixed scores: user u, item v
    let scores = |u: usize, v: usize| ((u * 13 + v * 7) % 11) as f64 / 4.0;
    let mut ranks = Vec::new();
    for u in 0..5 {
        let target = (u * 3) % 20;
        let negatives: Vec<usize> = (0..20).filter(|&v| v != target).collect();
        let neg_scores: Vec<f64> = negatives.iter().map(|&v| scores(u, v)).collect();
        // sort-based reference, ties placed before the held-out item
        let mut order: Vec<(f64, bool)> = neg_scores.iter().map(|&s| (s, false)).collect();
        order.push((scores(u, target), true));
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let reference = order.iter().position(|e| e.1).unwrap() + 1;
        assert_eq!(rank_of(scores(u, target), &neg_scores), reference);
        ranks.push(UserRank { user: u, item: target, rank: reference, negatives: 19 });
    }
    let protocol = EvalProtocol { n_negatives: 19, cutoffs: vec![1, 3, 5, 10], seed: 0 };
    let rep = EvalReport::from_ranks(&ranks, &protocol);
    for &c in &protocol.cutoffs {
        let hits = ranks.iter().filter(|r| r.rank <= c).count() as f64 / 5.0;
        let gain: f64 =
            ranks.iter().filter(|r| r.rank <= c).map(|r| 1.0 / ((r.rank + 1) as f64).log2()).sum::<f64>() / 5.0;
        assert_eq!(rep.hr_at(c), hits);
        assert_eq!(rep.ndcg_at(c), gain);
        assert_eq!(ndcg_at(1, c), 1.0);
    }
}

#[test]
fn random_model_hit_rate_is_chance() {
    let (n, m) = (2500, 400);
    let pairs = (0..n).flat_map(|u| (0..4).map(move |j| Interaction::at(u, (u * 31 + j * 97) % m, j as i64))).collect();
    let ds = InteractionDataset::new(n, m, pairs).unwrap();
    let split = leave_one_out_split(&ds, 1);
    let params = init_params(n, m, 8, 2, Variant::Mars, 9).unwrap();
    let rep = evaluate(&params, &split, &EvalProtocol::default(), EvalTarget::Test).unwrap();
    assert!(rep.users_evaluated >= 2000);
    assert!((rep.hr_at(10) - 10.0 / 101.0).abs() < 0.02, "{}", rep.hr_at(10));
}

#[test]
fn batched_scores_match_single_item_scores() {
    let p = init_params(4, 9, 5, 3, Variant::Mar, 2).unwrap();
    let items: Vec<usize> = (0..9).collect();
    for u in 0..4 {
        let batch = score_items(&p, u, &items).unwrap();
        for &v in &items {
            assert_eq!(batch[v], cross_facet_similarity(&p, u, v).unwrap());
        }
    }
}

#[test]
fn eval_negatives_are_distinct_unseen_and_stable() {
    let (n, m) = (30, 150);
    let pairs = (0..n).flat_map(|u| (0..5).map(move |j| Interaction::at(u, (u + j * 11) % m, j as i64))).collect();
    let split = leave_one_out_split(&InteractionDataset::new(n, m, pairs).unwrap(), 4);
    for u in 0..n {
        let a = sample_eval_negatives(&split, u, 100, 8);
        assert_eq!(a, sample_eval_negatives(&split, u, 100, 8));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert!(a.iter().all(|&v| !split.is_known_positive(u, v)));
    }
}
