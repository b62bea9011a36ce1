//! Push, pull and facet-separating losses with their analytic gradients.
//!
//! All three terms are means: push and pull over the triplets of a batch,
//! the facet term over touched entities and unordered facet pairs. The
//! gradient engine projects every touched entity once, accumulates the
//! gradient with respect to its facet embeddings, and only at the end
//! pulls those back through the shared projections.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{AdaptiveMargins, Triplet};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{FacetEmbedding, Geometry, ModelParams, Variant};

/// Loss weights and shape parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    pub lambda_pull: f64,
    pub lambda_facet: f64,
    /// Scale of the facet-separating softplus.
    pub alpha: f64,
    /// Hinge margin of the CML baseline.
    pub fixed_margin: f64,
    /// Include the item half of the spherical facet loss.
    pub facet_loss_items: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pull: 0.1,
            lambda_facet: 0.01,
            alpha: 0.1,
            fixed_margin: 1.0,
            facet_loss_items: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub push: f64,
    pub pull: f64,
    pub facet: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(push: f64, pull: f64, facet: f64, cfg: &LossConfig) -> Self {
        Self { push, pull, facet, total: push + cfg.lambda_pull * pull + cfg.lambda_facet * facet }
    }
}

/// One term of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Push,
    Pull,
    Facet,
}

/// Rows of a gradient keyed by entity id. Absent rows are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    width: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        Self { width, rows: BTreeMap::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    /// Value at (id, col), zero for absent rows.
    pub fn value(&self, id: usize, col: usize) -> f64 {
        self.rows.get(&id).map_or(0.0, |r| r[col])
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        let width = self.width;
        self.rows.entry(id).or_insert_with(|| vec![0.0; width])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&id, r)| (id, r.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn add_scaled(&mut self, other: &SparseRows, alpha: f64) {
        for (id, row) in other.iter() {
            linalg::axpy(alpha, row, self.row_mut(id));
        }
    }
}

/// Gradient of a scalar loss with the shapes of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub user_emb: SparseRows,
    pub item_emb: SparseRows,
    pub user_proj: Vec<Matrix>,
    pub item_proj: Vec<Matrix>,
    pub facet_logits: SparseRows,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let d = params.dim();
        let k = params.n_facets();
        Self {
            user_emb: SparseRows::new(d),
            item_emb: SparseRows::new(d),
            user_proj: vec![Matrix::zeros(d, d); k],
            item_proj: vec![Matrix::zeros(d, d); k],
            facet_logits: SparseRows::new(k),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Gradients, alpha: f64) {
        self.user_emb.add_scaled(&other.user_emb, alpha);
        self.item_emb.add_scaled(&other.item_emb, alpha);
        self.facet_logits.add_scaled(&other.facet_logits, alpha);
        for (a, b) in self.user_proj.iter_mut().zip(&other.user_proj) {
            linalg::axpy(alpha, b.as_slice(), a.as_mut_slice());
        }
        for (a, b) in self.item_proj.iter_mut().zip(&other.item_proj) {
            linalg::axpy(alpha, b.as_slice(), a.as_mut_slice());
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let sparse = [&self.user_emb, &self.item_emb, &self.facet_logits]
            .into_iter()
            .flat_map(|s| s.rows.values().flatten().copied());
        let dense = self
            .user_proj
            .iter()
            .chain(&self.item_proj)
            .flat_map(|m| m.as_slice().iter().copied());
        sparse.chain(dense)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Entities over which the facet-separating loss is averaged.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FacetScope {
    /// Distinct users (spherical user term).
    pub users: Vec<usize>,
    /// Distinct items (spherical item term).
    pub items: Vec<usize>,
    /// Distinct (user, item) pairs (Euclidean term, which couples both).
    pub pairs: Vec<(usize, usize)>,
}

impl FacetScope {
    /// Distinct users, all items, and positive pairs touched by a batch.
    pub fn of_batch(batch: &[Triplet]) -> Self {
        let users: BTreeSet<usize> = batch.iter().map(|t| t.user).collect();
        let items: BTreeSet<usize> = batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
        let pairs: BTreeSet<(usize, usize)> = batch.iter().map(|t| (t.user, t.pos)).collect();
        Self {
            users: users.into_iter().collect(),
            items: items.into_iter().collect(),
            pairs: pairs.into_iter().collect(),
        }
    }
}

fn margin_of(params: &ModelParams, margins: &AdaptiveMargins, cfg: &LossConfig, user: usize) -> f64 {
    match params.variant {
        Variant::Cml => cfg.fixed_margin,
        Variant::Mar | Variant::Mars => margins.get(user),
    }
}

/// Mean hinge `[margin_u - g(u, pos) + g(u, neg)]_+` over the batch.
pub fn loss_push(
    params: &ModelParams,
    batch: &[Triplet],
    margins: &AdaptiveMargins,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut ws = Workspace::new(params);
    ws.push(batch, margins, cfg, 0.0)
}

/// Mean of `-g(u, v)` over positive pairs.
pub fn loss_pull(params: &ModelParams, positives: &[(usize, usize)]) -> Result<f64> {
    let mut ws = Workspace::new(params);
    ws.pull(positives, 0.0)
}

/// Facet-separating softplus penalty, averaged over entities and facet
/// pairs `i < j`. Zero when there is a single facet.
pub fn loss_facet(params: &ModelParams, scope: &FacetScope, cfg: &LossConfig) -> Result<f64> {
    let mut ws = Workspace::new(params);
    ws.facet(scope, cfg, 0.0)
}

pub fn total_loss(
    params: &ModelParams,
    batch: &[Triplet],
    margins: &AdaptiveMargins,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    run(params, batch, margins, cfg, None).map(|(b, _)| b)
}

/// Loss breakdown and the exact gradient of `total` on one batch.
pub fn total_loss_gradients(
    params: &ModelParams,
    batch: &[Triplet],
    margins: &AdaptiveMargins,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let (breakdown, ws) = run(params, batch, margins, cfg, Some([1.0, cfg.lambda_pull, cfg.lambda_facet]))?;
    Ok((breakdown, ws.expect("gradient requested").finish()))
}

/// Unweighted value and gradient of a single term on one batch.
pub fn term_gradients(
    params: &ModelParams,
    batch: &[Triplet],
    margins: &AdaptiveMargins,
    cfg: &LossConfig,
    term: Term,
) -> Result<(f64, Gradients)> {
    let weights = match term {
        Term::Push => [1.0, 0.0, 0.0],
        Term::Pull => [0.0, 1.0, 0.0],
        Term::Facet => [0.0, 0.0, 1.0],
    };
    let (b, ws) = run(params, batch, margins, cfg, Some(weights))?;
    let value = match term {
        Term::Push => b.push,
        Term::Pull => b.pull,
        Term::Facet => b.facet,
    };
    Ok((value, ws.expect("gradient requested").finish()))
}

fn run<'p>(
    params: &'p ModelParams,
    batch: &[Triplet],
    margins: &AdaptiveMargins,
    cfg: &LossConfig,
    grad_weights: Option<[f64; 3]>,
) -> Result<(LossBreakdown, Option<Workspace<'p>>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    let [wp, wl, wf] = grad_weights.unwrap_or([0.0; 3]);
    let mut ws = Workspace::new(params);
    let push = ws.push(batch, margins, cfg, wp)?;
    let positives: Vec<(usize, usize)> = batch.iter().map(|t| (t.user, t.pos)).collect();
    let pull = ws.pull(&positives, wl)?;
    let facet = if params.variant == Variant::Cml {
        0.0
    } else {
        ws.facet(&FacetScope::of_batch(batch), cfg, wf)?
    };
    let breakdown = LossBreakdown::combine(push, pull, facet, cfg);
    Ok((breakdown, grad_weights.map(|_| ws)))
}

/// Facet embeddings of the touched entities and the gradient accumulated
/// against them.
struct Entities {
    local: BTreeMap<usize, usize>,
    ids: Vec<usize>,
    facets: Vec<FacetEmbedding>,
    grads: Vec<Matrix>,
}

impl Entities {
    fn new() -> Self {
        Self { local: BTreeMap::new(), ids: Vec::new(), facets: Vec::new(), grads: Vec::new() }
    }

    fn touch(&mut self, id: usize, project: impl FnOnce() -> FacetEmbedding) -> usize {
        if let Some(&l) = self.local.get(&id) {
            return l;
        }
        let l = self.ids.len();
        let f = project();
        self.grads.push(Matrix::zeros(f.rows.rows(), f.rows.cols()));
        self.facets.push(f);
        self.ids.push(id);
        self.local.insert(id, l);
        l
    }
}

struct Workspace<'p> {
    params: &'p ModelParams,
    geom: Geometry,
    users: Entities,
    items: Entities,
    theta: Vec<Vec<f64>>,
    logit_grads: Vec<Vec<f64>>,
}

impl<'p> Workspace<'p> {
    fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            geom: params.geometry(),
            users: Entities::new(),
            items: Entities::new(),
            theta: Vec::new(),
            logit_grads: Vec::new(),
        }
    }

    fn user(&mut self, id: usize) -> Result<usize> {
        check(id, self.params.n_users())?;
        let params = self.params;
        let l = self.users.touch(id, || params.user_facets(id));
        if l == self.theta.len() {
            self.theta.push(params.facet_weights(id));
            self.logit_grads.push(vec![0.0; params.n_facets()]);
        }
        Ok(l)
    }

    fn item(&mut self, id: usize) -> Result<usize> {
        check(id, self.params.n_items())?;
        let params = self.params;
        Ok(self.items.touch(id, || params.item_facets(id)))
    }

    /// Per-facet similarities and their mixture for local user/item.
    fn similarity(&self, lu: usize, lv: usize) -> Result<(Vec<f64>, f64)> {
        let uf = &self.users.facets[lu];
        let vf = &self.items.facets[lv];
        let theta = &self.theta[lu];
        let mut sims = Vec::with_capacity(theta.len());
        let mut g = 0.0;
        for (k, &w) in theta.iter().enumerate() {
            let s = match self.geom {
                Geometry::Euclidean => -linalg::sq_dist(uf.facet(k), vf.facet(k)),
                Geometry::Spherical => crate::model::cosine(uf.facet(k), vf.facet(k))?,
            };
            g += w * s;
            sims.push(s);
        }
        Ok((sims, g))
    }

    /// Accumulates `coef * dg(u, v)` into the facet and logit gradients.
    fn backprop_similarity(&mut self, coef: f64, lu: usize, lv: usize, sims: &[f64], g: f64) {
        if coef == 0.0 {
            return;
        }
        let theta = &self.theta[lu];
        for (j, lg) in self.logit_grads[lu].iter_mut().enumerate() {
            *lg += coef * theta[j] * (sims[j] - g);
        }
        let uf = &self.users.facets[lu];
        let vf = &self.items.facets[lv];
        let ug = &mut self.users.grads[lu];
        let vg = &mut self.items.grads[lv];
        for (k, &w) in theta.iter().enumerate() {
            let c = coef * w;
            let (a, b) = (uf.facet(k), vf.facet(k));
            match self.geom {
                Geometry::Euclidean => {
                    // d(-||a-b||^2)/da = -2(a-b)
                    for ((ga, gb), (x, y)) in
                        ug.row_mut(k).iter_mut().zip(vg.row_mut(k).iter_mut()).zip(a.iter().zip(b))
                    {
                        let diff = x - y;
                        *ga -= 2.0 * c * diff;
                        *gb += 2.0 * c * diff;
                    }
                }
                Geometry::Spherical => {
                    cosine_backprop(c, a, b, sims[k], ug.row_mut(k), vg.row_mut(k));
                }
            }
        }
    }

    fn push(
        &mut self,
        batch: &[Triplet],
        margins: &AdaptiveMargins,
        cfg: &LossConfig,
        weight: f64,
    ) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for t in batch {
            let lu = self.user(t.user)?;
            let lp = self.item(t.pos)?;
            let lq = self.item(t.neg)?;
            let (sp, gp) = self.similarity(lu, lp)?;
            let (sq, gq) = self.similarity(lu, lq)?;
            let hinge = margin_of(self.params, margins, cfg, t.user) - gp + gq;
            // ties count as inactive
            if hinge > 0.0 {
                total += hinge;
                self.backprop_similarity(-weight * scale, lu, lp, &sp, gp);
                self.backprop_similarity(weight * scale, lu, lq, &sq, gq);
            }
        }
        Ok(total * scale)
    }

    fn pull(&mut self, positives: &[(usize, usize)], weight: f64) -> Result<f64> {
        if positives.is_empty() {
            return Err(Error::Empty("no positive pairs"));
        }
        let scale = 1.0 / positives.len() as f64;
        let mut total = 0.0;
        for &(u, v) in positives {
            let lu = self.user(u)?;
            let lv = self.item(v)?;
            let (s, g) = self.similarity(lu, lv)?;
            total -= g;
            self.backprop_similarity(-weight * scale, lu, lv, &s, g);
        }
        Ok(total * scale)
    }

    fn facet(&mut self, scope: &FacetScope, cfg: &LossConfig, weight: f64) -> Result<f64> {
        let k = self.params.n_facets();
        if k < 2 {
            return Ok(0.0);
        }
        let n_pairs = (k * (k - 1) / 2) as f64;
        let alpha = cfg.alpha;
        match self.geom {
            Geometry::Euclidean => {
                if scope.pairs.is_empty() {
                    return Ok(0.0);
                }
                let scale = 1.0 / (scope.pairs.len() as f64 * n_pairs);
                let mut total = 0.0;
                for &(u, v) in &scope.pairs {
                    let lu = self.user(u)?;
                    let lv = self.item(v)?;
                    for i in 0..k {
                        for j in i + 1..k {
                            let uf = &self.users.facets[lu];
                            let vf = &self.items.facets[lv];
                            let d = linalg::sq_dist(uf.facet(i), uf.facet(j))
                                + linalg::sq_dist(vf.facet(i), vf.facet(j));
                            total += linalg::softplus(-alpha * d) / alpha;
                            // d/dd of softplus(-alpha d)/alpha
                            let c = -weight * scale * linalg::sigmoid(-alpha * d);
                            if c != 0.0 {
                                sq_dist_backprop(c, uf, i, j, &mut self.users.grads[lu]);
                                sq_dist_backprop(c, vf, i, j, &mut self.items.grads[lv]);
                            }
                        }
                    }
                }
                Ok(total * scale)
            }
            Geometry::Spherical => {
                let n_items = if cfg.facet_loss_items { scope.items.len() } else { 0 };
                let n_entities = scope.users.len() + n_items;
                if n_entities == 0 {
                    return Ok(0.0);
                }
                let scale = 1.0 / (n_entities as f64 * n_pairs);
                let mut total = 0.0;
                for &u in &scope.users {
                    let l = self.user(u)?;
                    total += cosine_separation(
                        &self.users.facets[l],
                        &mut self.users.grads[l],
                        alpha,
                        -weight * scale,
                    )?;
                }
                if cfg.facet_loss_items {
                    for &v in &scope.items {
                        let l = self.item(v)?;
                        total += cosine_separation(
                            &self.items.facets[l],
                            &mut self.items.grads[l],
                            alpha,
                            -weight * scale,
                        )?;
                    }
                }
                Ok(total * scale)
            }
        }
    }

    /// Pulls facet gradients back through the projections.
    fn finish(self) -> Gradients {
        let params = self.params;
        let mut out = Gradients::zeros_like(params);
        let d = params.dim();
        let mut buf = vec![0.0; d];
        let groups = [
            (&self.users, &params.user_emb, &params.user_proj, &mut out.user_emb, &mut out.user_proj),
            (&self.items, &params.item_emb, &params.item_proj, &mut out.item_emb, &mut out.item_proj),
        ];
        for (ents, emb, proj, emb_grad, proj_grad) in groups {
            for (l, &id) in ents.ids.iter().enumerate() {
                let x = emb.row(id);
                let row = emb_grad.row_mut(id);
                for (k, p) in proj.iter().enumerate() {
                    let gk = ents.grads[l].row(k);
                    linalg::mat_vec(p, gk, &mut buf);
                    linalg::axpy(1.0, &buf, row);
                    linalg::add_outer(1.0, x, gk, &mut proj_grad[k]);
                }
            }
        }
        for (l, &id) in self.users.ids.iter().enumerate() {
            out.facet_logits.row_mut(id).copy_from_slice(&self.logit_grads[l]);
        }
        out
    }
}

fn check(id: usize, bound: usize) -> Result<()> {
    if id < bound {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected: bound, actual: id + 1 })
    }
}

/// Adds `coef * dcos(a, b)` to `ga` and `gb`, where
/// `dcos/da = (b/|b| - cos a/|a|) / |a|`.
fn cosine_backprop(coef: f64, a: &[f64], b: &[f64], cos: f64, ga: &mut [f64], gb: &mut [f64]) {
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    let inv = 1.0 / (na * nb);
    for i in 0..a.len() {
        ga[i] += coef * (b[i] * inv - cos * a[i] / (na * na));
        gb[i] += coef * (a[i] * inv - cos * b[i] / (nb * nb));
    }
}

/// Adds `coef * d||f_i - f_j||^2` to the facet gradient.
fn sq_dist_backprop(coef: f64, f: &FacetEmbedding, i: usize, j: usize, grad: &mut Matrix) {
    let d = f.rows.cols();
    for c in 0..d {
        let diff = f.facet(i)[c] - f.facet(j)[c];
        grad.row_mut(i)[c] += 2.0 * coef * diff;
        grad.row_mut(j)[c] -= 2.0 * coef * diff;
    }
}

/// `sum_{i<j} softplus(-alpha cos(f_i, f_j)) / alpha` for one entity, with
/// `coef * d/dcos` folded into the gradient (`d/dcos = -sigmoid(-alpha cos)`
/// up to the sign carried by `coef`).
fn cosine_separation(f: &FacetEmbedding, grad: &mut Matrix, alpha: f64, coef: f64) -> Result<f64> {
    let k = f.n_facets();
    let d = f.rows.cols();
    let mut total = 0.0;
    let mut gi = vec![0.0; d];
    let mut gj = vec![0.0; d];
    for i in 0..k {
        for j in i + 1..k {
            let cos = crate::model::cosine(f.facet(i), f.facet(j))?;
            total += linalg::softplus(-alpha * cos) / alpha;
            let c = coef * linalg::sigmoid(-alpha * cos);
            if c != 0.0 {
                gi.iter_mut().for_each(|x| *x = 0.0);
                gj.iter_mut().for_each(|x| *x = 0.0);
                cosine_backprop(c, f.facet(i), f.facet(j), cos, &mut gi, &mut gj);
                linalg::axpy(1.0, &gi, grad.row_mut(i));
                linalg::axpy(1.0, &gj, grad.row_mut(j));
            }
        }
    }
    Ok(total)
}
