//! Parameter updates and the finite-difference gradient oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{max_facet_norm, Geometry, ModelParams};
use crate::objective::{Gradients, SparseRows};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Gradients with a smaller norm leave a spherical row untouched.
    pub grad_epsilon: f64,
    /// Scale tangent steps by `1 + cos(x, grad)`; off gives plain
    /// retraction-based Riemannian SGD.
    pub calibrate: bool,
}

impl OptimConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, grad_epsilon: 1e-12, calibrate: true }
    }
}

/// `g - (x . g) x`
pub fn tangent_project(x: &[f64], g: &[f64]) -> Vec<f64> {
    let c = linalg::dot(x, g);
    x.iter().zip(g).map(|(xi, gi)| gi - c * xi).collect()
}

/// `(x + z) / ||x + z||`
pub fn retract(x: &[f64], z: &[f64]) -> Vec<f64> {
    let mut y: Vec<f64> = x.iter().zip(z).map(|(a, b)| a + b).collect();
    let n = linalg::norm(&y);
    linalg::scale(1.0 / n, &mut y);
    y
}

/// `1 + (x . g) / ||g||`, in `[0, 2]` for unit `x`.
pub fn calibration_multiplier(x: &[f64], g: &[f64]) -> f64 {
    (1.0 + linalg::dot(x, g) / linalg::norm(g)).clamp(0.0, 2.0)
}

/// One calibrated Riemannian step on the unit sphere.
pub fn calibrated_rsgd_step(x: &[f64], g: &[f64], cfg: &OptimConfig) -> Result<Vec<f64>> {
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    if linalg::norm(g) < cfg.grad_epsilon || cfg.learning_rate == 0.0 {
        return Ok(x.to_vec());
    }
    let multiplier = if cfg.calibrate { calibration_multiplier(x, g) } else { 1.0 };
    let mut z = tangent_project(x, g);
    linalg::scale(-cfg.learning_rate * multiplier, &mut z);
    Ok(retract(x, &z))
}

fn ensure_finite(grads: &Gradients) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient)
    }
}

fn sgd_rows(m: &mut Matrix, rows: &SparseRows, lr: f64) {
    for (id, g) in rows.iter() {
        linalg::axpy(-lr, g, m.row_mut(id));
    }
}

fn sgd_shared(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    if params.variant.trains_projections() {
        for (p, g) in params.user_proj.iter_mut().zip(&grads.user_proj) {
            linalg::axpy(-lr, g.as_slice(), p.as_mut_slice());
        }
        for (p, g) in params.item_proj.iter_mut().zip(&grads.item_proj) {
            linalg::axpy(-lr, g.as_slice(), p.as_mut_slice());
        }
    }
    sgd_rows(&mut params.facet_logits, &grads.facet_logits, lr);
}

/// Rescales row `id` so that its largest facet norm is at most one.
/// Returns the scale applied.
pub fn clip_to_ball(emb: &mut Matrix, proj: &[Matrix], id: usize) -> f64 {
    let s = max_facet_norm(emb.row(id), proj);
    if s > 1.0 {
        linalg::scale(1.0 / s, emb.row_mut(id));
        1.0 / s
    } else {
        1.0
    }
}

/// Plain SGD followed by rescaling of every touched universal row into the
/// feasible set `max_k ||x^T P_k|| <= 1`.
pub fn projected_sgd_step(params: &mut ModelParams, grads: &Gradients, cfg: &OptimConfig) -> Result<()> {
    ensure_finite(grads)?;
    let lr = cfg.learning_rate;
    sgd_rows(&mut params.user_emb, &grads.user_emb, lr);
    sgd_rows(&mut params.item_emb, &grads.item_emb, lr);
    sgd_shared(params, grads, lr);
    for id in grads.user_emb.ids() {
        clip_to_ball(&mut params.user_emb, &params.user_proj, id);
    }
    for id in grads.item_emb.ids() {
        clip_to_ball(&mut params.item_emb, &params.item_proj, id);
    }
    Ok(())
}

/// Rescales every user and item row into the feasible set.
pub fn enforce_ball(params: &mut ModelParams) {
    for id in 0..params.n_users() {
        clip_to_ball(&mut params.user_emb, &params.user_proj, id);
    }
    for id in 0..params.n_items() {
        clip_to_ball(&mut params.item_emb, &params.item_proj, id);
    }
}

/// Calibrated Riemannian steps on touched universal rows; Euclidean SGD on
/// projections and facet logits.
pub fn spherical_sgd_step(params: &mut ModelParams, grads: &Gradients, cfg: &OptimConfig) -> Result<()> {
    ensure_finite(grads)?;
    for (emb, rows) in [(&mut params.user_emb, &grads.user_emb), (&mut params.item_emb, &grads.item_emb)] {
        for (id, g) in rows.iter() {
            let next = calibrated_rsgd_step(emb.row(id), g, cfg)?;
            emb.row_mut(id).copy_from_slice(&next);
        }
    }
    sgd_shared(params, grads, cfg.learning_rate);
    Ok(())
}

/// Dispatches on the model geometry.
pub fn step(params: &mut ModelParams, grads: &Gradients, cfg: &OptimConfig) -> Result<()> {
    match params.geometry() {
        Geometry::Euclidean => projected_sgd_step(params, grads, cfg),
        Geometry::Spherical => spherical_sgd_step(params, grads, cfg),
    }
}

/// Parameter block of [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    UserEmb,
    ItemEmb,
    UserProj,
    ItemProj,
    FacetLogits,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::UserEmb,
        ParamGroup::ItemEmb,
        ParamGroup::UserProj,
        ParamGroup::ItemProj,
        ParamGroup::FacetLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::UserEmb => "user_emb",
            ParamGroup::ItemEmb => "item_emb",
            ParamGroup::UserProj => "user_proj",
            ParamGroup::ItemProj => "item_proj",
            ParamGroup::FacetLogits => "facet_logits",
        }
    }
}

/// Location of one scalar parameter. `facet` is only meaningful for
/// projection groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coord {
    pub group: ParamGroup,
    pub facet: usize,
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn label(&self) -> String {
        match self.group {
            ParamGroup::UserProj | ParamGroup::ItemProj => {
                format!("{}[{}][{},{}]", self.group.name(), self.facet, self.row, self.col)
            }
            _ => format!("{}[{},{}]", self.group.name(), self.row, self.col),
        }
    }
}

/// Every scalar coordinate of `params`, in a fixed order.
pub fn coordinates(params: &ModelParams) -> Vec<Coord> {
    let (n, m, d, k) = (params.n_users(), params.n_items(), params.dim(), params.n_facets());
    let mut out = Vec::new();
    let mut grid = |group, facet, rows, cols| {
        for row in 0..rows {
            for col in 0..cols {
                out.push(Coord { group, facet, row, col });
            }
        }
    };
    grid(ParamGroup::UserEmb, 0, n, d);
    grid(ParamGroup::ItemEmb, 0, m, d);
    for f in 0..k {
        grid(ParamGroup::UserProj, f, d, d);
    }
    for f in 0..k {
        grid(ParamGroup::ItemProj, f, d, d);
    }
    grid(ParamGroup::FacetLogits, 0, n, k);
    out
}

pub fn param_mut(params: &mut ModelParams, c: Coord) -> &mut f64 {
    let m = match c.group {
        ParamGroup::UserEmb => &mut params.user_emb,
        ParamGroup::ItemEmb => &mut params.item_emb,
        ParamGroup::UserProj => &mut params.user_proj[c.facet],
        ParamGroup::ItemProj => &mut params.item_proj[c.facet],
        ParamGroup::FacetLogits => &mut params.facet_logits,
    };
    &mut m.row_mut(c.row)[c.col]
}

pub fn grad_value(grads: &Gradients, c: Coord) -> f64 {
    match c.group {
        ParamGroup::UserEmb => grads.user_emb.value(c.row, c.col),
        ParamGroup::ItemEmb => grads.item_emb.value(c.row, c.col),
        ParamGroup::UserProj => grads.user_proj[c.facet].get(c.row, c.col),
        ParamGroup::ItemProj => grads.item_proj[c.facet].get(c.row, c.col),
        ParamGroup::FacetLogits => grads.facet_logits.value(c.row, c.col),
    }
}

fn grad_slot(grads: &mut Gradients, c: Coord) -> &mut f64 {
    match c.group {
        ParamGroup::UserEmb => &mut grads.user_emb.row_mut(c.row)[c.col],
        ParamGroup::ItemEmb => &mut grads.item_emb.row_mut(c.row)[c.col],
        ParamGroup::UserProj => &mut grads.user_proj[c.facet].row_mut(c.row)[c.col],
        ParamGroup::ItemProj => &mut grads.item_proj[c.facet].row_mut(c.row)[c.col],
        ParamGroup::FacetLogits => &mut grads.facet_logits.row_mut(c.row)[c.col],
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` over every
/// coordinate. Spherical rows are perturbed off the sphere without
/// renormalisation, so this is the ambient Euclidean gradient.
pub fn finite_difference_gradient<F>(mut loss: F, params: &ModelParams, h: f64) -> Result<Gradients>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut out = Gradients::zeros_like(params);
    for c in coordinates(params) {
        let orig = *param_mut(&mut probe, c);
        *param_mut(&mut probe, c) = orig + h;
        let up = loss(&probe)?;
        *param_mut(&mut probe, c) = orig - h;
        let down = loss(&probe)?;
        *param_mut(&mut probe, c) = orig;
        *grad_slot(&mut out, c) = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Worst discrepancy inside one parameter group.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GroupError {
    pub group: &'static str,
    pub worst_error: f64,
    pub worst_coord: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_error: f64,
    pub worst_coord: String,
    pub passed: bool,
}

/// Compares gradients coordinate by coordinate. Coordinates whose analytic
/// value is below `abs_floor` in magnitude are judged by absolute error
/// against `abs_floor`; the rest by `|a - n| / max(|a|, |n|)` against
/// `rel_tol`. The reported error is normalised by the applicable tolerance
/// so that `<= 1` means pass.
pub fn compare_gradients(
    analytic: &Gradients,
    numeric: &Gradients,
    params: &ModelParams,
    rel_tol: f64,
    abs_floor: f64,
) -> GradCheckReport {
    let mut groups: Vec<GroupError> = ParamGroup::ALL
        .iter()
        .map(|g| GroupError {
            group: g.name(),
            worst_error: 0.0,
            worst_coord: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            coords: 0,
        })
        .collect();
    let mut passed = true;
    for c in coordinates(params) {
        let a = grad_value(analytic, c);
        let n = grad_value(numeric, c);
        let ratio = if a.abs() < abs_floor {
            (a - n).abs() / abs_floor
        } else {
            (a - n).abs() / a.abs().max(n.abs()) / rel_tol
        };
        let ok = ratio < 1.0;
        passed &= ok;
        let slot = &mut groups[ParamGroup::ALL.iter().position(|g| *g == c.group).unwrap()];
        slot.coords += 1;
        if !(ratio <= slot.worst_error) {
            slot.worst_error = ratio;
            slot.worst_coord = c.label();
            slot.analytic = a;
            slot.numeric = n;
        }
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.worst_error.total_cmp(&b.worst_error))
        .expect("non-empty");
    let (max_error, worst_coord) = (worst.worst_error, worst.worst_coord.clone());
    GradCheckReport { groups, max_error, worst_coord, passed }
}

/// Largest universal-row facet norm over a set of rows, for constraint
/// checks.
pub fn max_ball_violation(params: &ModelParams) -> f64 {
    let users = (0..params.n_users()).map(|u| max_facet_norm(params.user_emb.row(u), &params.user_proj));
    let items = (0..params.n_items()).map(|v| max_facet_norm(params.item_emb.row(v), &params.item_proj));
    users.chain(items).fold(0.0, f64::max)
}

/// Largest `| ||row|| - 1 |` over all universal rows.
pub fn max_sphere_deviation(params: &ModelParams) -> f64 {
    let rows = (0..params.n_users())
        .map(|u| params.user_emb.row(u))
        .chain((0..params.n_items()).map(|v| params.item_emb.row(v)));
    rows.map(|r| (linalg::norm(r) - 1.0).abs()).fold(0.0, f64::max)
}
