//! Learnable parameters and the facet-space similarity functions.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::seeded;

/// Similarity geometry of the facet spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Geometry {
    /// Negative squared distance, facet embeddings kept inside the unit ball.
    Euclidean,
    /// Cosine similarity, universal embeddings on the unit sphere.
    Spherical,
}

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Variant {
    /// Single Euclidean space, fixed margin, identity projection.
    Cml,
    /// Multi-facet Euclidean model with adaptive margins.
    Mar,
    /// Multi-facet spherical model with calibrated Riemannian updates.
    Mars,
}

impl Variant {
    pub fn geometry(self) -> Geometry {
        match self {
            Variant::Cml | Variant::Mar => Geometry::Euclidean,
            Variant::Mars => Geometry::Spherical,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cml => "cml",
            Variant::Mar => "mar",
            Variant::Mars => "mars",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cml" => Some(Variant::Cml),
            "mar" => Some(Variant::Mar),
            "mars" => Some(Variant::Mars),
            _ => None,
        }
    }

    /// CML keeps its projection fixed at the identity.
    pub fn trains_projections(self) -> bool {
        !matches!(self, Variant::Cml)
    }
}

/// All learnable state.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelParams {
    pub variant: Variant,
    /// Universal user embeddings, `N x D`.
    pub user_emb: Matrix,
    /// Universal item embeddings, `M x D`.
    pub item_emb: Matrix,
    /// `K` user projections, each `D x D`.
    pub user_proj: Vec<Matrix>,
    /// `K` item projections, each `D x D`.
    pub item_proj: Vec<Matrix>,
    /// Pre-softmax facet weights, `N x K`.
    pub facet_logits: Matrix,
}

impl ModelParams {
    pub fn geometry(&self) -> Geometry {
        self.variant.geometry()
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn n_facets(&self) -> usize {
        self.user_proj.len()
    }

    pub fn user_facets(&self, user: usize) -> FacetEmbedding {
        project_unchecked(self.user_emb.row(user), &self.user_proj)
    }

    pub fn item_facets(&self, item: usize) -> FacetEmbedding {
        project_unchecked(self.item_emb.row(item), &self.item_proj)
    }

    pub fn facet_weights(&self, user: usize) -> Vec<f64> {
        facet_weights(self.facet_logits.row(user))
    }

    /// Checks shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let all = || {
            [&self.user_emb, &self.item_emb, &self.facet_logits]
                .into_iter()
                .chain(&self.user_proj)
                .chain(&self.item_proj)
        };
        if !all().all(Matrix::is_well_formed) {
            return Err(Error::InvalidConfig("matrix buffer does not match its shape".into()));
        }
        let d = self.dim();
        let k = self.n_facets();
        let check = |expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected, actual })
            }
        };
        if d == 0 || k == 0 {
            return Err(Error::InvalidConfig("dim and facet count must be >= 1".into()));
        }
        check(d, self.item_emb.cols())?;
        check(k, self.item_proj.len())?;
        for p in self.user_proj.iter().chain(&self.item_proj) {
            check(d, p.rows())?;
            check(d, p.cols())?;
        }
        check(self.n_users(), self.facet_logits.rows())?;
        check(k, self.facet_logits.cols())?;
        if self.variant == Variant::Cml {
            check(1, k)?;
        }
        let finite = all().all(|m| m.as_slice().iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Facet-specific embeddings of one entity: row `k` is `x^T P_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FacetEmbedding {
    pub rows: Matrix,
}

impl FacetEmbedding {
    pub fn facet(&self, k: usize) -> &[f64] {
        self.rows.row(k)
    }

    pub fn n_facets(&self) -> usize {
        self.rows.rows()
    }

    /// Largest facet norm, the quantity bounded by the unit-ball constraint.
    pub fn max_norm(&self) -> f64 {
        (0..self.n_facets()).map(|k| linalg::norm(self.facet(k))).fold(0.0, f64::max)
    }
}

pub fn project_facets(x: &[f64], proj: &[Matrix]) -> Result<FacetEmbedding> {
    for p in proj {
        if p.rows() != x.len() {
            return Err(Error::DimensionMismatch { expected: p.rows(), actual: x.len() });
        }
    }
    Ok(project_unchecked(x, proj))
}

fn project_unchecked(x: &[f64], proj: &[Matrix]) -> FacetEmbedding {
    let cols = proj.first().map_or(0, Matrix::cols);
    let mut rows = Matrix::zeros(proj.len(), cols);
    for (k, p) in proj.iter().enumerate() {
        linalg::vec_mat(x, p, rows.row_mut(k));
    }
    FacetEmbedding { rows }
}

/// Softmax with max subtraction.
pub fn facet_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Per-facet similarity: `-||a - b||^2` or `cos(a, b)`.
pub fn facet_similarity(a: &[f64], b: &[f64], geom: Geometry) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    match geom {
        Geometry::Euclidean => Ok(-linalg::sq_dist(a, b)),
        Geometry::Spherical => cosine(a, b),
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `sum_k theta_u^k g^k(u^k, v^k)` for facet embeddings already projected.
pub(crate) fn mixed_similarity(
    uf: &FacetEmbedding,
    vf: &FacetEmbedding,
    theta: &[f64],
    geom: Geometry,
) -> Result<f64> {
    let mut g = 0.0;
    for (k, &w) in theta.iter().enumerate() {
        g += w * facet_similarity(uf.facet(k), vf.facet(k), geom)?;
    }
    Ok(g)
}

pub fn cross_facet_similarity(params: &ModelParams, user: usize, item: usize) -> Result<f64> {
    check_id(user, params.n_users())?;
    check_id(item, params.n_items())?;
    mixed_similarity(
        &params.user_facets(user),
        &params.item_facets(item),
        &params.facet_weights(user),
        params.geometry(),
    )
}

/// Cross-facet similarity of one user against many items, projecting the
/// user once.
pub fn score_items(params: &ModelParams, user: usize, candidates: &[usize]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate items"));
    }
    check_id(user, params.n_users())?;
    let uf = params.user_facets(user);
    let theta = params.facet_weights(user);
    let geom = params.geometry();
    candidates
        .iter()
        .map(|&v| {
            check_id(v, params.n_items())?;
            mixed_similarity(&uf, &params.item_facets(v), &theta, geom)
        })
        .collect()
}

fn check_id(id: usize, bound: usize) -> Result<()> {
    if id < bound {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected: bound, actual: id + 1 })
    }
}

/// Standard deviation of the projection noise around the identity.
pub const PROJECTION_INIT_NOISE: f64 = 0.01;

/// Random initialisation: embeddings `N(0, 1/sqrt(D))` (unit rows for the
/// spherical variant), projections `I + N(0, 0.01)` (exact identity for
/// CML), zero facet logits.
pub fn init_params(
    n_users: usize,
    n_items: usize,
    dim: usize,
    n_facets: usize,
    variant: Variant,
    seed: u64,
) -> Result<ModelParams> {
    if n_users == 0 || n_items == 0 || dim == 0 || n_facets == 0 {
        return Err(Error::InvalidConfig("all model dimensions must be >= 1".into()));
    }
    if variant == Variant::Cml && n_facets != 1 {
        return Err(Error::InvalidConfig("cml uses exactly one facet".into()));
    }
    let mut rng = seeded(seed);
    let emb = Normal::new(0.0, 1.0 / libm::sqrt(dim as f64)).expect("positive std");
    let noise = Normal::new(0.0, PROJECTION_INIT_NOISE).expect("positive std");

    let mut gaussian = |rows: usize| {
        let data = (0..rows * dim).map(|_| emb.sample(&mut rng)).collect();
        Matrix::from_vec(rows, dim, data)
    };
    let mut user_emb = gaussian(n_users);
    let mut item_emb = gaussian(n_items);
    if variant.geometry() == Geometry::Spherical {
        normalize_rows(&mut user_emb);
        normalize_rows(&mut item_emb);
    }

    let projections = |rng: &mut crate::rng::StageRng| -> Vec<Matrix> {
        (0..n_facets)
            .map(|_| {
                let mut p = Matrix::identity(dim);
                if variant.trains_projections() {
                    p.as_mut_slice().iter_mut().for_each(|x| *x += noise.sample(rng));
                }
                p
            })
            .collect()
    };
    let user_proj = projections(&mut rng);
    let item_proj = projections(&mut rng);

    Ok(ModelParams {
        variant,
        user_emb,
        item_emb,
        user_proj,
        item_proj,
        facet_logits: Matrix::zeros(n_users, n_facets),
    })
}

pub(crate) fn normalize_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = linalg::norm(row);
        if n > 0.0 {
            linalg::scale(1.0 / n, row);
        } else {
            row[0] = 1.0;
        }
    }
}

/// Largest facet norm of universal row `x` under `proj`.
pub fn max_facet_norm(x: &[f64], proj: &[Matrix]) -> f64 {
    let mut buf = vec![0.0; x.len()];
    proj.iter()
        .map(|p| {
            linalg::vec_mat(x, p, &mut buf);
            linalg::norm(&buf)
        })
        .fold(0.0, f64::max)
}
