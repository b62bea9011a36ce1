//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5, 9 and 10 are exact or statistical oracles; a FAIL there
//! fails the target. Criteria 6-8 are empirical reproductions whose outcome
//! is reported as measured; set `MARS_ACCEPT_STRICT=1` to make any FAIL fatal.
//! Criteria 7 and 8 need ML-100K at `data/ml-100k.inter` (or `MARS_ML100K`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use mars::commands::{gradcheck, GradcheckArgs};
use mars::io::{load_interactions, DelimitedFormat};
use mars_core::dataset::{conflict_role, sample_negative, ConflictRole, TripletSampler};
use mars_core::eval::{rank_of, EvalReport, UserRank};
use mars_core::linalg;
use mars_core::optim::{calibration_multiplier, projected_sgd_step};
use mars_core::rng::{seeded, stream_seed, Stream};
use mars_core::trainer::Silent;
use mars_core::{
    calibrated_rsgd_step, compute_adaptive_margins, cross_facet_similarity, evaluate,
    generate_conflict_dataset, init_params, leave_one_out_split, score_items, total_loss_gradients,
    train, user_sampling_distribution, AdaptiveMargins, EvalProtocol, EvalTarget, Interaction,
    InteractionDataset, LossConfig, ModelParams, OptimConfig, SplitDataset, TrainConfig, Triplet,
    Variant,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ------------------------------------------------------------------ 1

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for variant in [Variant::Mar, Variant::Mars] {
        for seed in 0..3 {
            let out = gradcheck(&GradcheckArgs { variant, seed, ..Default::default() }).expect("gradcheck runs");
            for term in &out.terms {
                worst = worst.max(term.report.max_error);
                if !term.report.passed {
                    failed.push(format!("{}/{}/seed{}", variant.name(), term.term, seed));
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        failed.is_empty() && secs < 60.0,
        format!("worst error {worst:.3} of tolerance over push/pull/facet/total, both geometries, {secs:.1}s; failed {failed:?}"),
    )
}

// ------------------------------------------------------------------ 2

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn manifold() -> Verdict {
    let mut rng = seeded(2);
    let cfg = OptimConfig::new(0.5);
    let mut rows: Vec<Vec<f64>> = (0..16)
        .map(|_| {
            let mut x = gaussian(&mut rng, 32);
            linalg::scale(1.0 / linalg::norm(&x), &mut x);
            x
        })
        .collect();
    let (mut worst_norm, mut lo, mut hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let r = rng.gen_range(0..rows.len());
        let mut g = gaussian(&mut rng, 32);
        linalg::scale(10f64.powi(rng.gen_range(-4..3)), &mut g);
        let m = calibration_multiplier(&rows[r], &g);
        lo = lo.min(m);
        hi = hi.max(m);
        rows[r] = calibrated_rsgd_step(&rows[r], &g, &cfg).expect("finite gradient");
        worst_norm = worst_norm.max((linalg::norm(&rows[r]) - 1.0).abs());
    }
    verdict(
        worst_norm <= 1e-9 && lo >= 0.0 && hi <= 2.0,
        format!("max | ||x|| - 1 | = {worst_norm:.1e}, multiplier in [{lo:.3}, {hi:.3}]"),
    )
}

// ------------------------------------------------------------------ 3

fn ball() -> Verdict {
    let (n, m) = (40, 60);
    let mut rng = seeded(3);
    let pairs = (0..n).flat_map(|u| (0..m).filter(move |v| (u * 7 + v) % 5 == 0).map(move |v| Interaction::new(u, v)));
    let ds = InteractionDataset::new(n, m, pairs.collect()).unwrap();
    let margins = compute_adaptive_margins(&ds);
    let mut params = init_params(n, m, 8, 4, Variant::Mar, 3).unwrap();
    let loss = LossConfig::default();
    let cfg = OptimConfig::new(1.0);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let batch: Vec<Triplet> = (0..16)
            .map(|_| {
                let user = rng.gen_range(0..n);
                let items = ds.items_of_user(user);
                Triplet { user, pos: items[rng.gen_range(0..items.len())], neg: sample_negative(items, m, &mut rng) }
            })
            .collect();
        let (_, grads) = total_loss_gradients(&params, &batch, &margins, &loss).unwrap();
        projected_sgd_step(&mut params, &grads, &cfg).unwrap();
        for t in &batch {
            for s in [params.user_facets(t.user).max_norm(), params.item_facets(t.pos).max_norm(), params.item_facets(t.neg).max_norm()] {
                worst = worst.max(s);
            }
        }
    }
    verdict(worst <= 1.0 + 1e-9, format!("max facet norm of touched rows over 500 steps = {worst:.12}"))
}

// ------------------------------------------------------------------ 4

/// Empirical user frequencies of `draws` sampled triplets against the
/// analytic distribution.
fn sampler_errors(freqs: &[usize], draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let m = freqs.iter().max().unwrap() + 1;
    let pairs = freqs.iter().enumerate().flat_map(|(u, &f)| (0..f).map(move |v| Interaction::new(u, v)));
    let ds = InteractionDataset::new(freqs.len(), m, pairs.collect()).unwrap();
    let dist = user_sampling_distribution(&ds, 0.8).unwrap();
    let sampler = TripletSampler::new(&ds, &dist).unwrap();
    let mut counts = vec![0usize; freqs.len()];
    let mut rng = seeded(seed);
    for t in sampler.sample(draws, 1, &mut rng) {
        counts[t.user] += 1;
    }
    let z: f64 = freqs.iter().map(|&f| (f as f64).powf(0.8)).sum();
    let analytic: Vec<f64> = freqs.iter().map(|&f| (f as f64).powf(0.8) / z).collect();
    let empirical = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    (analytic, empirical)
}

fn sampler() -> Verdict {
    const DRAWS: usize = 1_000_000;
    // ten heavy users hold most of the mass; the tail sits below 0.005
    let two_tier: Vec<usize> = (0..100).map(|u| if u < 10 { 600 + 40 * u } else { 1 + u % 4 }).collect();
    let (a, e) = sampler_errors(&two_tier, DRAWS, 4);
    let eligible: Vec<usize> = (0..100).filter(|&u| a[u] >= 0.005).collect();
    let rel = eligible.iter().map(|&u| (e[u] - a[u]).abs() / a[u]).fold(0.0, f64::max);

    // long-tailed profile: every user within 4.5 binomial standard errors
    let zipf: Vec<usize> = (0..100).map(|u| (2000.0 / ((u + 1) as f64).powf(1.2)).round() as usize + 1).collect();
    let (a, e) = sampler_errors(&zipf, DRAWS, 5);
    let zmax = (0..100).map(|u| (e[u] - a[u]).abs() / (a[u] * (1.0 - a[u]) / DRAWS as f64).sqrt()).fold(0.0, f64::max);

    let mut rng = seeded(6);
    let mut leaks = 0usize;
    let mut checked = 0usize;
    for u in 0..50usize {
        let positives: Vec<usize> = (0..50).filter(|v| (u * 17 + v * 29) % 50 < u.clamp(1, 49)).collect();
        for q in (0..2000).map(|_| sample_negative(&positives, 50, &mut rng)) {
            checked += 1;
            leaks += usize::from(positives.binary_search(&q).is_ok());
        }
    }
    verdict(
        rel < 0.01 && zmax < 4.5 && leaks == 0,
        format!(
            "max rel err {:.4} over {} users with Pr >= 0.005; long-tail max |z| {zmax:.2}; {leaks} positives in {checked} negatives (50x50)",
            rel,
            eligible.len()
        ),
    )
}

// ------------------------------------------------------------------ 5

fn metrics() -> Verdict {
    let scores = |u: usize, v: usize| ((u * 13 + v * 7) % 11) as f64 / 4.0;
    let cutoffs = vec![1, 3, 5, 10];
    let mut ranks = Vec::new();
    let mut reference = Vec::new();
    for u in 0..5 {
        let target = (u * 3) % 20;
        let negs: Vec<f64> = (0..20).filter(|&v| v != target).map(|v| scores(u, v)).collect();
        let mut order: Vec<(f64, bool)> = negs.iter().map(|&s| (s, false)).collect();
        order.push((scores(u, target), true));
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        reference.push(order.iter().position(|e| e.1).unwrap() + 1);
        ranks.push(UserRank { user: u, item: target, rank: rank_of(scores(u, target), &negs), negatives: 19 });
    }
    let rep = EvalReport::from_ranks(&ranks, &EvalProtocol { n_negatives: 19, cutoffs: cutoffs.clone(), seed: 0 });
    let exact = cutoffs.iter().all(|&c| {
        let hits: Vec<&usize> = reference.iter().filter(|&&r| r <= c).collect();
        let hr = hits.len() as f64 / 5.0;
        let ndcg = hits.iter().map(|&&r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / 5.0;
        rep.hr_at(c) == hr && rep.ndcg_at(c) == ndcg
    });

    let (n, m) = (10_000, 500);
    let pairs = (0..n).flat_map(|u| (0..4).map(move |j| Interaction::at(u, (u * 31 + j * 97) % m, j as i64)));
    let split = leave_one_out_split(&InteractionDataset::new(n, m, pairs.collect()).unwrap(), 1);
    let params = init_params(n, m, 8, 2, Variant::Mars, 9).unwrap();
    let random = evaluate(&params, &split, &EvalProtocol::default(), EvalTarget::Test).unwrap();
    let hr = random.hr_at(10);
    verdict(
        exact && (hr - 10.0 / 101.0).abs() <= 0.01 && random.users_evaluated >= 2000,
        format!(
            "hand instance exact: {exact}; random model HR@10 = {hr:.4} over {} users (chance {:.4})",
            random.users_evaluated,
            10.0 / 101.0
        ),
    )
}

// ------------------------------------------------------------------ 6

fn exhaustive_push(p: &ModelParams, ds: &InteractionDataset, margins: &AdaptiveMargins) -> f64 {
    let all: Vec<usize> = (0..ds.n_items()).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for u in 0..ds.n_users() {
        let s = score_items(p, u, &all).unwrap();
        for &v in ds.items_of_user(u) {
            for q in (0..ds.n_items()).filter(|&q| !ds.contains(u, q)) {
                sum += (margins.get(u) - s[v] + s[q]).max(0.0);
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// HR@1 of C-role positives ranked against every item the user never
/// interacted with.
fn hr1_c(p: &ModelParams, ds: &InteractionDataset) -> f64 {
    let all: Vec<usize> = (0..ds.n_items()).collect();
    let (mut hits, mut n) = (0usize, 0usize);
    for u in (0..ds.n_users()).filter(|&u| conflict_role(u) == ConflictRole::C) {
        let s = score_items(p, u, &all).unwrap();
        let negs: Vec<f64> = (0..ds.n_items()).filter(|&q| !ds.contains(u, q)).map(|q| s[q]).collect();
        for &v in ds.items_of_user(u) {
            hits += usize::from(rank_of(s[v], &negs) == 1);
            n += 1;
        }
    }
    hits as f64 / n as f64
}

fn conflict() -> Verdict {
    let t = Instant::now();
    let ds = generate_conflict_dataset(50, 0).unwrap();
    let margins = compute_adaptive_margins(&ds);
    let split = SplitDataset::from_parts(ds.clone(), vec![], vec![]).unwrap();
    let fit = |k: usize, seed: u64| {
        let cfg = TrainConfig {
            variant: Variant::Mars,
            k,
            dim: 8,
            seed,
            epochs: 3000,
            batch_size: 10,
            eval_every: 3000,
            ..Default::default()
        };
        let (p, _) = train(&split, &cfg, &mut Silent).unwrap();
        (exhaustive_push(&p, &ds, &margins), hr1_c(&p, &ds))
    };
    let single: Vec<(f64, f64)> = (0..5).map(|s| fit(1, s)).collect();
    let best = single.iter().copied().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
    let (push2, hr2) = fit(2, 0);
    let secs = t.elapsed().as_secs_f64();
    let ratio = push2 / best.0;
    verdict(
        ratio < 0.5 && hr2 > best.1 && secs < 300.0,
        format!(
            "K=2 push {push2:.4} vs best K=1 {:.4} (ratio {ratio:.2}, need < 0.5); C-user HR@1 {hr2:.3} vs {:.3}; {secs:.0}s",
            best.0, best.1
        ),
    )
}

// ------------------------------------------------------------------ 7, 8

fn ml100k_path() -> PathBuf {
    std::env::var_os("MARS_ML100K")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k.inter"))
}

fn ml100k() -> Result<SplitDataset, String> {
    let path = ml100k_path();
    if !path.exists() {
        return Err(format!("dataset not found at {}", path.display()));
    }
    let fmt = DelimitedFormat { skip_header: true, timestamp_col: Some(3), ..Default::default() };
    let loaded = load_interactions(&path, &fmt).map_err(|e| e.to_string())?;
    Ok(leave_one_out_split(&loaded.dataset, stream_seed(0, Stream::Split)))
}

/// Desk configuration per variant: D=32, K=4 (1 for CML), 30 epochs, and the
/// learning rate and pull weight chosen on dev nDCG@10.
fn tuned(variant: Variant) -> TrainConfig {
    let (k, lambda_pull) = match variant {
        Variant::Cml => (1, 0.01),
        Variant::Mar => (4, 0.1),
        Variant::Mars => (4, 0.1),
    };
    TrainConfig { variant, k, dim: 32, epochs: 30, batch_size: 20, learning_rate: 0.1, lambda_pull, ..Default::default() }
}

fn ordering(split: &SplitDataset) -> Verdict {
    let protocol = EvalProtocol { seed: stream_seed(0, Stream::Eval), ..Default::default() };
    let mut ndcg = Vec::new();
    let mut parts = Vec::new();
    for v in [Variant::Cml, Variant::Mar, Variant::Mars] {
        let (p, _) = train(split, &tuned(v), &mut Silent).unwrap();
        let rep = evaluate(&p, split, &protocol, EvalTarget::Test).unwrap();
        ndcg.push(rep.ndcg_at(10));
        parts.push(format!("{} HR@10 {:.4} nDCG@10 {:.4}", v.name(), rep.hr_at(10), rep.ndcg_at(10)));
    }
    let (cml, mar, mars) = (ndcg[0], ndcg[1], ndcg[2]);
    verdict(mars >= mar * 1.01 && mar >= cml * 1.01, format!("test: {}; need MARS > MAR > CML by >= 1%", parts.join(", ")))
}

fn k_ablation(split: &SplitDataset) -> Verdict {
    let mut dev = Vec::new();
    for k in 1..=6 {
        let cfg = TrainConfig { k, epochs: 15, ..tuned(Variant::Mar) };
        let (_, log) = train(split, &cfg, &mut Silent).unwrap();
        dev.push(log.best().map_or(f64::NAN, |r| r.dev_ndcg10));
    }
    let interior = dev[1..5].iter().any(|&d| d > dev[0] && d > dev[5]);
    let shown: Vec<String> = dev.iter().enumerate().map(|(i, d)| format!("K={} {d:.4}", i + 1)).collect();
    verdict(interior, format!("MAR dev nDCG@10 (15 epochs): {}", shown.join(", ")))
}

// ------------------------------------------------------------------ 9

fn scale_invariance() -> Verdict {
    let mut rng = seeded(9);
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let mut p = init_params(3, 4, 6, 3, Variant::Mars, case).unwrap();
        for x in p.facet_logits.as_mut_slice() {
            *x = rng.gen_range(-2.0..2.0);
        }
        let (u, v) = (rng.gen_range(0..3), rng.gen_range(0..4));
        let before = cross_facet_similarity(&p, u, v).unwrap();
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let row = if rng.gen::<bool>() { p.user_emb.row_mut(u) } else { p.item_emb.row_mut(v) };
        linalg::scale(scale, row);
        worst = worst.max((cross_facet_similarity(&p, u, v).unwrap() - before).abs());
    }
    verdict(worst <= 1e-12, format!("max |g(cx) - g(x)| over 1000 cases = {worst:.1e}"))
}

// ------------------------------------------------------------------ 10

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_mars"))
        .current_dir(dir)
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_pipeline(dir: &Path) -> bool {
    [
        &["synth-conflict", "--blocks", "30", "--out", "synth", "--seed", "7"][..],
        &["split", "--input", "synth/conflict.tsv", "--out", "data", "--seed", "7"],
        &[
            "train", "--data", "data", "--out", "run", "--variant", "mars", "--k", "2", "--dim", "8", "--epochs", "4",
            "--batch-size", "16", "--eval-negatives", "30", "--seed", "7", "--workers", "1", "--quiet",
        ],
        &[
            "eval", "--data", "data", "--checkpoint", "run/best.json", "--negatives", "30", "--seed", "7",
            "--workers", "1", "--out", "eval.json", "--ranks", "ranks.tsv",
        ],
    ]
    .iter()
    .all(|args| run_cli(dir, args))
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "timing.tsv") {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if !(cli_pipeline(a.path()) && cli_pipeline(b.path())) {
        return verdict(false, "a command failed");
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    verdict(
        fa.len() == fb.len() && differing.is_empty(),
        format!("{} output files compared (wall-clock timing.tsv excluded); differing {differing:?}", fa.len()),
    )
}

fn main() -> ExitCode {
    let strict = std::env::var_os("MARS_ACCEPT_STRICT").is_some_and(|v| v == "1");
    let mut oracle_failed = false;
    let mut any_failed = false;
    let mut report = |id: u8, oracle: bool, v: Verdict| {
        println!("criterion {id:>2}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        any_failed |= !v.pass;
        oracle_failed |= oracle && !v.pass;
    };
    report(1, true, gradients());
    report(2, true, manifold());
    report(3, true, ball());
    report(4, true, sampler());
    report(5, true, metrics());
    report(6, false, conflict());
    match ml100k() {
        Ok(split) => {
            report(7, false, ordering(&split));
            report(8, false, k_ablation(&split));
        }
        Err(e) => {
            report(7, false, verdict(false, e.clone()));
            report(8, false, verdict(false, e));
        }
    }
    report(9, true, scale_invariance());
    report(10, true, determinism());
    if oracle_failed || (strict && any_failed) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
