//! Multi-facet metric learning for top-N recommendation from implicit
//! feedback.
//!
//! Users and items carry one universal embedding each. Shared linear
//! projections map it into `K` facet spaces, and a per-user softmax over
//! facets mixes the facet similarities into one score. Two geometries are
//! supported: Euclidean (negative squared distance, unit-ball constraint,
//! projected SGD) and spherical (cosine similarity, universal embeddings on
//! the unit sphere, calibrated Riemannian SGD).
//!
//! The crate is `no_std` with `alloc`; file formats and the command-line
//! front end live in the `mars` crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod dataset;
mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use dataset::{
    compute_adaptive_margins, generate_conflict_dataset, leave_one_out_split, sample_batch,
    user_sampling_distribution, AdaptiveMargins, Interaction, InteractionDataset, SplitDataset,
    Triplet,
};
pub use error::{Error, Result};
pub use eval::{evaluate, rank_test_item, EvalProtocol, EvalReport, EvalTarget};
pub use linalg::Matrix;
pub use model::{
    cross_facet_similarity, facet_similarity, facet_weights, init_params, project_facets,
    score_items, FacetEmbedding, Geometry, ModelParams, Variant,
};
pub use objective::{
    loss_facet, loss_pull, loss_push, total_loss, total_loss_gradients, Gradients, LossBreakdown,
    LossConfig, SparseRows, Term,
};
pub use optim::{
    calibrated_rsgd_step, finite_difference_gradient, projected_sgd_step, retract,
    spherical_sgd_step, tangent_project, OptimConfig,
};
pub use trainer::{grid_cells, rank_results, run_cell, sweep, train, SweepResult, TrainConfig, TrainLog, TrainObserver, TrainRecord};
