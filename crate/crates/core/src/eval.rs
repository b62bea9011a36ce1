//! Leave-one-out ranking evaluation against sampled negatives.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{score_items, ModelParams};
use crate::rng::{seeded, substream_seed};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalProtocol {
    pub n_negatives: usize,
    pub cutoffs: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { n_negatives: 100, cutoffs: vec![10, 20], seed: 0 }
    }
}

impl EvalProtocol {
    /// True when the negative pool is smaller than the largest cutoff, in
    /// which case HR at that cutoff is trivially one.
    pub fn cutoff_exceeds_pool(&self) -> bool {
        self.cutoffs.iter().any(|&c| c > self.n_negatives)
    }
}

/// Which held-out partition to rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Dev,
    Test,
}

/// Rank of one user's held-out item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserRank {
    pub user: usize,
    pub item: usize,
    /// 1-based; ties with negatives count against the held-out item.
    pub rank: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub users_evaluated: usize,
    /// Users whose negative pool had fewer than `n_negatives` items.
    pub users_short_of_negatives: usize,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[UserRank], protocol: &EvalProtocol) -> Self {
        let n = ranks.len();
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &cutoff in &protocol.cutoffs {
            let (mut hits, mut gain) = (0usize, 0.0);
            for r in ranks {
                if r.rank <= cutoff {
                    hits += 1;
                    gain += ndcg_at(r.rank, cutoff);
                }
            }
            let denom = n.max(1) as f64;
            hr.insert(cutoff, hits as f64 / denom);
            ndcg.insert(cutoff, gain / denom);
        }
        let short = ranks.iter().filter(|r| r.negatives < protocol.n_negatives).count();
        Self { hr, ndcg, users_evaluated: n, users_short_of_negatives: short }
    }

    pub fn hr_at(&self, cutoff: usize) -> f64 {
        self.hr.get(&cutoff).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, cutoff: usize) -> f64 {
        self.ndcg.get(&cutoff).copied().unwrap_or(f64::NAN)
    }

    /// nDCG@N <= HR@N per cutoff and HR non-decreasing in N.
    pub fn is_consistent(&self) -> bool {
        let ordered = self.hr.values().zip(self.hr.values().skip(1)).all(|(a, b)| a <= b);
        ordered && self.hr.iter().all(|(c, h)| self.ndcg.get(c).is_some_and(|n| *n <= *h + 1e-15))
    }
}

/// Gain of a single relevant item at `rank` (1-based) under cutoff `n`.
pub fn ndcg_at(rank: usize, n: usize) -> f64 {
    if rank >= 1 && rank <= n {
        1.0 / libm::log2(rank as f64 + 1.0)
    } else {
        0.0
    }
}

/// `1 + #{negatives scoring >= target}`.
pub fn rank_of(target: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= target).count()
}

/// Rank of `test_item` for `user` among `negatives`.
pub fn rank_test_item(
    params: &ModelParams,
    user: usize,
    test_item: usize,
    negatives: &[usize],
) -> Result<usize> {
    if negatives.contains(&test_item) {
        return Err(Error::InvalidConfig("held-out item listed among negatives".into()));
    }
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(test_item);
    candidates.extend_from_slice(negatives);
    let scores = score_items(params, user, &candidates)?;
    Ok(rank_of(scores[0], &scores[1..]))
}

/// Up to `n` distinct items the user has no known interaction with, drawn
/// uniformly from the user's own seeded stream.
pub fn sample_eval_negatives(
    split: &SplitDataset,
    user: usize,
    n: usize,
    seed: u64,
) -> Vec<usize> {
    let m = split.train.n_items();
    let available = m - split.known_positive_count(user);
    let mut rng = seeded(substream_seed(seed, user as u64));
    if available <= n {
        return (0..m).filter(|&v| !split.is_known_positive(user, v)).collect();
    }
    if available < 2 * n {
        let mut pool: Vec<usize> = (0..m).filter(|&v| !split.is_known_positive(user, v)).collect();
        for i in 0..n {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(n);
        return pool;
    }
    let mut chosen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.gen_range(0..m);
        if !split.is_known_positive(user, v) && chosen.insert(v) {
            out.push(v);
        }
    }
    out
}

/// Rank for one user, or `None` if the user has no held-out item.
pub fn user_rank(
    params: &ModelParams,
    split: &SplitDataset,
    protocol: &EvalProtocol,
    target: EvalTarget,
    user: usize,
) -> Result<Option<UserRank>> {
    let held = match target {
        EvalTarget::Dev => split.dev_item(user),
        EvalTarget::Test => split.test_item(user),
    };
    let Some(item) = held else { return Ok(None) };
    let negatives = sample_eval_negatives(split, user, protocol.n_negatives, protocol.seed);
    let rank = rank_test_item(params, user, item, &negatives)?;
    Ok(Some(UserRank { user, item, rank, negatives: negatives.len() }))
}

/// Ranks of every user holding out an item in `target`, in user order.
pub fn evaluate_ranks(
    params: &ModelParams,
    split: &SplitDataset,
    protocol: &EvalProtocol,
    target: EvalTarget,
) -> Result<Vec<UserRank>> {
    let mut out = Vec::new();
    for user in 0..split.train.n_users() {
        if let Some(r) = user_rank(params, split, protocol, target, user)? {
            out.push(r);
        }
    }
    Ok(out)
}

/// HR@N and nDCG@N averaged over users.
pub fn evaluate(
    params: &ModelParams,
    split: &SplitDataset,
    protocol: &EvalProtocol,
    target: EvalTarget,
) -> Result<EvalReport> {
    if split.train.n_items() != params.n_items() || split.train.n_users() != params.n_users() {
        return Err(Error::DimensionMismatch { expected: params.n_items(), actual: split.train.n_items() });
    }
    let ranks = evaluate_ranks(params, split, protocol, target)?;
    Ok(EvalReport::from_ranks(&ranks, protocol))
}
