//! Interaction data: indexing, leave-one-out splits, adaptive margins and
//! biased triplet sampling.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Rejection attempts before negative sampling falls back to scanning the
/// complement of the user's items.
pub const NEGATIVE_REJECTION_ATTEMPTS: usize = 100;

/// One observed (user, item) event with dense ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(user: usize, item: usize) -> Self {
        Self { user, item, timestamp: None }
    }

    pub fn at(user: usize, item: usize, timestamp: i64) -> Self {
        Self { user, item, timestamp: Some(timestamp) }
    }
}

/// Binary implicit-feedback matrix with both adjacency directions.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    pairs: Vec<Interaction>,
    items_of_user: Vec<Vec<usize>>,
    users_of_item: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Builds the index. Duplicate (user, item) rows collapse into one pair
    /// that keeps the earliest timestamp; pairs are stored sorted by
    /// (user, item).
    pub fn new(n_users: usize, n_items: usize, interactions: Vec<Interaction>) -> Result<Self> {
        let mut merged: BTreeMap<(usize, usize), Option<i64>> = BTreeMap::new();
        for it in interactions {
            if it.user >= n_users {
                return Err(Error::DimensionMismatch { expected: n_users, actual: it.user + 1 });
            }
            if it.item >= n_items {
                return Err(Error::DimensionMismatch { expected: n_items, actual: it.item + 1 });
            }
            merged
                .entry((it.user, it.item))
                .and_modify(|ts| *ts = earliest(*ts, it.timestamp))
                .or_insert(it.timestamp);
        }

        let mut items_of_user = vec![Vec::new(); n_users];
        let mut users_of_item = vec![Vec::new(); n_items];
        let mut pairs = Vec::with_capacity(merged.len());
        for ((user, item), timestamp) in merged {
            items_of_user[user].push(item);
            users_of_item[item].push(user);
            pairs.push(Interaction { user, item, timestamp });
        }
        Ok(Self { n_users, n_items, pairs, items_of_user, users_of_item })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn pairs(&self) -> &[Interaction] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Sorted items the user interacted with.
    pub fn items_of_user(&self, user: usize) -> &[usize] {
        &self.items_of_user[user]
    }

    /// Sorted users that interacted with the item.
    pub fn users_of_item(&self, item: usize) -> &[usize] {
        &self.users_of_item[item]
    }

    pub fn freq(&self, user: usize) -> usize {
        self.items_of_user[user].len()
    }

    pub fn freq_of_user(&self) -> Vec<usize> {
        self.items_of_user.iter().map(Vec::len).collect()
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.items_of_user[user].binary_search(&item).is_ok()
    }
}

fn earliest(a: Option<i64>, b: Option<i64>) -> Option<i64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Leave-one-out split with one dev and one test item per eligible user.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: InteractionDataset,
    /// Held-out development pairs, sorted by user.
    pub dev: Vec<Interaction>,
    /// Held-out test pairs, sorted by user.
    pub test: Vec<Interaction>,
    /// Users with fewer than three interactions, kept train-only.
    pub train_only_users: usize,
    dev_item: Vec<Option<usize>>,
    test_item: Vec<Option<usize>>,
}

impl SplitDataset {
    /// Assembles a split from explicit parts (e.g. manifests read from disk).
    pub fn from_parts(
        train: InteractionDataset,
        mut dev: Vec<Interaction>,
        mut test: Vec<Interaction>,
    ) -> Result<Self> {
        let n = train.n_users();
        let m = train.n_items();
        let mut dev_item = vec![None; n];
        let mut test_item = vec![None; n];
        for (held, slots) in [(&dev, &mut dev_item), (&test, &mut test_item)] {
            for it in held.iter() {
                if it.user >= n {
                    return Err(Error::DimensionMismatch { expected: n, actual: it.user + 1 });
                }
                if it.item >= m {
                    return Err(Error::DimensionMismatch { expected: m, actual: it.item + 1 });
                }
                if slots[it.user].replace(it.item).is_some() {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "user {} has more than one held-out item",
                        it.user
                    )));
                }
            }
        }
        dev.sort_by_key(|it| it.user);
        test.sort_by_key(|it| it.user);
        let train_only_users =
            (0..n).filter(|&u| train.freq(u) > 0 && test_item[u].is_none()).count();
        Ok(Self { train, dev, test, train_only_users, dev_item, test_item })
    }

    pub fn dev_item(&self, user: usize) -> Option<usize> {
        self.dev_item[user]
    }

    pub fn test_item(&self, user: usize) -> Option<usize> {
        self.test_item[user]
    }

    /// True if `item` is a known positive of `user` in any partition.
    pub fn is_known_positive(&self, user: usize, item: usize) -> bool {
        self.dev_item[user] == Some(item)
            || self.test_item[user] == Some(item)
            || self.train.contains(user, item)
    }

    /// Number of known positives of `user` across all partitions.
    pub fn known_positive_count(&self, user: usize) -> usize {
        self.train.freq(user)
            + usize::from(self.dev_item[user].is_some())
            + usize::from(self.test_item[user].is_some())
    }
}

/// Holds out the latest interaction of every user with at least three for
/// test and the second-latest for dev. Users without complete timestamps
/// get two distinct items drawn uniformly from `seed`.
pub fn leave_one_out_split(ds: &InteractionDataset, seed: u64) -> SplitDataset {
    let mut rng = seeded(seed);
    let mut train = Vec::with_capacity(ds.len());
    let mut dev = Vec::new();
    let mut test = Vec::new();

    let mut start = 0;
    let pairs = ds.pairs();
    while start < pairs.len() {
        let user = pairs[start].user;
        let mut end = start;
        while end < pairs.len() && pairs[end].user == user {
            end += 1;
        }
        let rows = &pairs[start..end];
        start = end;

        if rows.len() < 3 {
            train.extend_from_slice(rows);
            continue;
        }
        let (test_idx, dev_idx) = if rows.iter().all(|r| r.timestamp.is_some()) {
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.sort_by_key(|&i| (rows[i].timestamp, rows[i].item));
            (order[rows.len() - 1], order[rows.len() - 2])
        } else {
            let picked = index::sample(&mut rng, rows.len(), 2);
            (picked.index(0), picked.index(1))
        };
        for (i, row) in rows.iter().enumerate() {
            if i == test_idx {
                test.push(*row);
            } else if i == dev_idx {
                dev.push(*row);
            } else {
                train.push(*row);
            }
        }
    }

    let train = InteractionDataset::new(ds.n_users(), ds.n_items(), train)
        .expect("train pairs come from a valid dataset");
    SplitDataset::from_parts(train, dev, test).expect("one held-out item per user")
}

/// Per-user hinge margins derived from the two-hop neighbourhood on the
/// user-item graph.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptiveMargins {
    pub gamma: Vec<f64>,
}

impl AdaptiveMargins {
    /// Same margin for every user (the fixed-margin baseline).
    pub fn constant(n_users: usize, margin: f64) -> Self {
        Self { gamma: vec![margin; n_users] }
    }

    pub fn get(&self, user: usize) -> f64 {
        self.gamma[user]
    }
}

/// `gamma_u = 1 - |union of U_v over v in V_u| / N`. The union is over
/// distinct users, so the user always counts itself and the value stays in
/// `[0, 1 - 1/N]` for active users. Users without interactions get 1.
pub fn compute_adaptive_margins(ds: &InteractionDataset) -> AdaptiveMargins {
    let n = ds.n_users();
    let mut seen = vec![usize::MAX; n];
    let mut gamma = Vec::with_capacity(n);
    for u in 0..n {
        let mut count = 0usize;
        for &v in ds.items_of_user(u) {
            for &w in ds.users_of_item(v) {
                if seen[w] != u {
                    seen[w] = u;
                    count += 1;
                }
            }
        }
        gamma.push(1.0 - count as f64 / n as f64);
    }
    AdaptiveMargins { gamma }
}

/// `Pr(u) = freq(u)^beta / sum freq(u')^beta`, zero for inactive users.
pub fn user_sampling_distribution(ds: &InteractionDataset, beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("beta must be >= 0, got {beta}")));
    }
    let weights: Vec<f64> = (0..ds.n_users())
        .map(|u| match ds.freq(u) {
            0 => 0.0,
            f => libm::pow(f as f64, beta),
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoActiveUsers);
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Training example: user, positive item, negative item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Reusable sampler over a fixed train set and user distribution.
#[derive(Debug, Clone)]
pub struct TripletSampler<'a> {
    ds: &'a InteractionDataset,
    users: WeightedIndex<f64>,
}

impl<'a> TripletSampler<'a> {
    pub fn new(ds: &'a InteractionDataset, dist: &[f64]) -> Result<Self> {
        if dist.len() != ds.n_users() {
            return Err(Error::DimensionMismatch { expected: ds.n_users(), actual: dist.len() });
        }
        let users = WeightedIndex::new(dist.iter().copied()).map_err(|_| Error::NoActiveUsers)?;
        let any_open = dist
            .iter()
            .enumerate()
            .any(|(u, &p)| p > 0.0 && ds.freq(u) > 0 && ds.freq(u) < ds.n_items());
        if !any_open {
            return Err(Error::AllUsersSaturated);
        }
        Ok(Self { ds, users })
    }

    /// Draws `batch_size` (user, positive) pairs and `n_neg` negatives for
    /// each.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        n_neg: usize,
        rng: &mut R,
    ) -> Vec<Triplet> {
        let mut out = Vec::with_capacity(batch_size * n_neg);
        for _ in 0..batch_size {
            let user = loop {
                let u = self.users.sample(rng);
                let f = self.ds.freq(u);
                if f > 0 && f < self.ds.n_items() {
                    break u;
                }
            };
            let items = self.ds.items_of_user(user);
            let pos = items[rng.gen_range(0..items.len())];
            for _ in 0..n_neg {
                let neg = sample_negative(items, self.ds.n_items(), rng);
                out.push(Triplet { user, pos, neg });
            }
        }
        out
    }
}

/// Uniform draw from `[0, n_items)` minus the sorted `positives`.
pub fn sample_negative<R: Rng + ?Sized>(positives: &[usize], n_items: usize, rng: &mut R) -> usize {
    debug_assert!(positives.len() < n_items);
    for _ in 0..NEGATIVE_REJECTION_ATTEMPTS {
        let v = rng.gen_range(0..n_items);
        if positives.binary_search(&v).is_err() {
            return v;
        }
    }
    nth_outside(positives, rng.gen_range(0..n_items - positives.len()))
}

/// The `r`-th smallest non-negative integer missing from sorted `taken`.
fn nth_outside(taken: &[usize], mut r: usize) -> usize {
    let mut candidate = 0;
    for &p in taken {
        if candidate + r < p {
            break;
        }
        r -= p - candidate;
        candidate = p + 1;
    }
    candidate + r
}

/// One batch of triplets; see [`TripletSampler`].
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &InteractionDataset,
    dist: &[f64],
    batch_size: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if batch_size == 0 || n_neg == 0 {
        return Err(Error::InvalidConfig("batch_size and n_neg must be >= 1".into()));
    }
    Ok(TripletSampler::new(ds, dist)?.sample(batch_size, n_neg, rng))
}

/// Role of a user inside one block of the conflict dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictRole {
    A,
    B,
    C,
}

/// Users per block of the conflict dataset.
pub const CONFLICT_USERS_PER_BLOCK: usize = 3;
/// Items per block of the conflict dataset.
pub const CONFLICT_ITEMS_PER_BLOCK: usize = 5;

pub fn conflict_role(user: usize) -> ConflictRole {
    match user % CONFLICT_USERS_PER_BLOCK {
        0 => ConflictRole::A,
        1 => ConflictRole::B,
        _ => ConflictRole::C,
    }
}

/// Disjoint copies of the five-item pattern in which A likes {1, 2},
/// B likes {4, 5} and C likes {2, 3, 4}. Block `b` owns users `3b..3b+3`
/// (A, B, C) and items `5b..5b+5` (items 1..5). The seed only assigns
/// interaction timestamps, which decide the held-out items of a split.
pub fn generate_conflict_dataset(n_blocks: usize, seed: u64) -> Result<InteractionDataset> {
    if n_blocks == 0 {
        return Err(Error::Empty("conflict dataset needs at least one block"));
    }
    const PATTERN: [(usize, usize); 7] = [(0, 0), (0, 1), (1, 3), (1, 4), (2, 1), (2, 2), (2, 3)];
    let mut rng = seeded(seed);
    let mut rows = Vec::with_capacity(n_blocks * PATTERN.len());
    for b in 0..n_blocks {
        for &(role, item) in &PATTERN {
            let ts = i64::from(rng.gen::<u32>());
            rows.push(Interaction::at(
                b * CONFLICT_USERS_PER_BLOCK + role,
                b * CONFLICT_ITEMS_PER_BLOCK + item,
                ts,
            ));
        }
    }
    InteractionDataset::new(
        n_blocks * CONFLICT_USERS_PER_BLOCK,
        n_blocks * CONFLICT_ITEMS_PER_BLOCK,
        rows,
    )
}
