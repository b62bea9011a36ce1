//! Training loop, early stopping and grid sweeps.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{compute_adaptive_margins, user_sampling_distribution, SplitDataset, TripletSampler};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalProtocol, EvalTarget};
use crate::model::{init_params, ModelParams, Variant};
use crate::objective::{total_loss_gradients, LossBreakdown, LossConfig};
use crate::optim::{self, OptimConfig};
use crate::rng::{stream_rng, stream_seed, Stream};

/// Losses above this magnitude abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub variant: Variant,
    pub k: usize,
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_neg: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch (1 = constant).
    pub lr_decay: f64,
    pub lambda_pull: f64,
    pub lambda_facet: f64,
    pub alpha: f64,
    pub beta: f64,
    pub fixed_margin: f64,
    pub seed: u64,
    pub patience: usize,
    pub eval_every: usize,
    pub eval_negatives: usize,
    pub calibrate: bool,
    pub facet_loss_items: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mars,
            k: 4,
            dim: 32,
            epochs: 30,
            batch_size: 1000,
            n_neg: 1,
            learning_rate: 0.1,
            lr_decay: 1.0,
            lambda_pull: 0.1,
            lambda_facet: 0.01,
            alpha: 0.1,
            beta: 0.8,
            fixed_margin: 1.0,
            seed: 0,
            patience: 10,
            eval_every: 1,
            eval_negatives: 100,
            calibrate: true,
            facet_loss_items: true,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in the order written by
/// [`TrainConfig::to_pairs`].
pub const CONFIG_KEYS: [&str; 20] = [
    "variant",
    "k",
    "dim",
    "epochs",
    "batch_size",
    "n_neg",
    "learning_rate",
    "lr_decay",
    "lambda_pull",
    "lambda_facet",
    "alpha",
    "beta",
    "fixed_margin",
    "seed",
    "patience",
    "eval_every",
    "eval_negatives",
    "calibrate",
    "facet_loss_items",
    "lr",
];

fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Sets one field from its text form. `lr` is an alias of
    /// `learning_rate`; dashes are accepted in place of underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        match key.as_str() {
            "variant" => {
                self.variant = Variant::parse(value)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{value}`")))?
            }
            "k" => self.k = parse(&key, value)?,
            "dim" => self.dim = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "n_neg" => self.n_neg = parse(&key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(&key, value)?,
            "lr_decay" => self.lr_decay = parse(&key, value)?,
            "lambda_pull" => self.lambda_pull = parse(&key, value)?,
            "lambda_facet" => self.lambda_facet = parse(&key, value)?,
            "alpha" => self.alpha = parse(&key, value)?,
            "beta" => self.beta = parse(&key, value)?,
            "fixed_margin" => self.fixed_margin = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "patience" => self.patience = parse(&key, value)?,
            "eval_every" => self.eval_every = parse(&key, value)?,
            "eval_negatives" => self.eval_negatives = parse(&key, value)?,
            "calibrate" => self.calibrate = parse(&key, value)?,
            "facet_loss_items" => self.facet_loss_items = parse(&key, value)?,
            _ => return Err(Error::UnknownParameter(key)),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text; feeding these back through
    /// [`TrainConfig::set`] reproduces the config exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.name().to_string()),
            ("k", self.k.to_string()),
            ("dim", self.dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("n_neg", self.n_neg.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("lr_decay", format!("{:?}", self.lr_decay)),
            ("lambda_pull", format!("{:?}", self.lambda_pull)),
            ("lambda_facet", format!("{:?}", self.lambda_facet)),
            ("alpha", format!("{:?}", self.alpha)),
            ("beta", format!("{:?}", self.beta)),
            ("fixed_margin", format!("{:?}", self.fixed_margin)),
            ("seed", self.seed.to_string()),
            ("patience", self.patience.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_negatives", self.eval_negatives.to_string()),
            ("calibrate", self.calibrate.to_string()),
            ("facet_loss_items", self.facet_loss_items.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.variant == Variant::Cml && self.k != 1 {
            return fail("cml requires k = 1");
        }
        if self.k == 0 || self.dim == 0 {
            return fail("k and dim must be >= 1");
        }
        if self.batch_size == 0 || self.n_neg == 0 || self.eval_every == 0 {
            return fail("batch_size, n_neg and eval_every must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return fail("learning_rate and lr_decay must be > 0");
        }
        if !(self.alpha > 0.0) || !(self.fixed_margin > 0.0) {
            return fail("alpha and fixed_margin must be > 0");
        }
        if !(self.lambda_pull >= 0.0) || !(self.lambda_facet >= 0.0) || !(self.beta >= 0.0) {
            return fail("lambda_pull, lambda_facet and beta must be >= 0");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_pull: self.lambda_pull,
            lambda_facet: self.lambda_facet,
            alpha: self.alpha,
            fixed_margin: self.fixed_margin,
            facet_loss_items: self.facet_loss_items,
        }
    }

    pub fn dev_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            n_negatives: self.eval_negatives,
            cutoffs: vec![10],
            seed: stream_seed(self.seed, Stream::Eval),
        }
    }
}

/// One logged evaluation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean of the batch losses of this epoch.
    pub loss: LossBreakdown,
    pub dev_hr10: f64,
    pub dev_ndcg10: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best(&self) -> Option<&TrainRecord> {
        self.best_epoch.and_then(|e| self.records.iter().find(|r| r.epoch == e))
    }
}

/// Hooks into a training run.
pub trait TrainObserver {
    /// Seconds since the run started; the core has no clock.
    fn elapsed_seconds(&mut self) -> f64 {
        0.0
    }

    /// Called after each evaluation with the parameters just evaluated.
    fn on_evaluation(&mut self, _record: &TrainRecord, _params: &ModelParams, _is_best: bool) {}
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct Silent;

impl TrainObserver for Silent {}

/// Trains one model and returns the parameters with the best dev HR@10.
/// Without dev pairs every evaluation is logged with NaN metrics, the last
/// parameters are returned and early stopping never triggers.
pub fn train(
    split: &SplitDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let train = &split.train;
    let mut params = init_params(
        train.n_users(),
        train.n_items(),
        cfg.dim,
        cfg.k,
        cfg.variant,
        stream_seed(cfg.seed, Stream::Init),
    )?;
    if cfg.variant.geometry() == crate::model::Geometry::Euclidean {
        optim::enforce_ball(&mut params);
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }
    if train.is_empty() {
        return Err(Error::Empty("training split has no interactions"));
    }

    let margins = compute_adaptive_margins(train);
    let dist = user_sampling_distribution(train, cfg.beta)?;
    let sampler = TripletSampler::new(train, &dist)?;
    let loss_cfg = cfg.loss_config();
    let protocol = cfg.dev_protocol();
    let mut rng = stream_rng(cfg.seed, Stream::Sampling);
    let batches = train.len().div_ceil(cfg.batch_size);

    let mut best: Option<(f64, ModelParams)> = None;
    let mut stale = 0usize;
    let mut lr = cfg.learning_rate;
    let has_dev = !split.dev.is_empty();

    for epoch in 1..=cfg.epochs {
        let opt = OptimConfig { learning_rate: lr, grad_epsilon: 1e-12, calibrate: cfg.calibrate };
        let mut sum = LossBreakdown::default();
        for b in 0..batches {
            let batch = sampler.sample(cfg.batch_size, cfg.n_neg, &mut rng);
            let (loss, grads) = total_loss_gradients(&params, &batch, &margins, &loss_cfg)?;
            if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged { epoch, batch: b, loss: loss.total });
            }
            optim::step(&mut params, &grads, &opt)?;
            sum.push += loss.push;
            sum.pull += loss.pull;
            sum.facet += loss.facet;
            sum.total += loss.total;
        }
        lr *= cfg.lr_decay;

        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        if cfg.variant.geometry() == crate::model::Geometry::Euclidean {
            optim::enforce_ball(&mut params);
        }
        let (dev_hr10, dev_ndcg10) = if has_dev {
            let report = evaluate(&params, split, &protocol, EvalTarget::Dev)?;
            (report.hr_at(10), report.ndcg_at(10))
        } else {
            (f64::NAN, f64::NAN)
        };
        let n = batches as f64;
        let record = TrainRecord {
            epoch,
            loss: LossBreakdown {
                push: sum.push / n,
                pull: sum.pull / n,
                facet: sum.facet / n,
                total: sum.total / n,
            },
            dev_hr10,
            dev_ndcg10,
            seconds: observer.elapsed_seconds(),
        };
        let improved = !has_dev || best.as_ref().is_none_or(|(hr, _)| record.dev_hr10 > *hr);
        if improved {
            best = Some((record.dev_hr10, params.clone()));
            log.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        observer.on_evaluation(&record, &params, improved);
        log.records.push(record);
        if stale >= cfg.patience {
            log.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let (_, best_params) = best.expect("at least one evaluation ran");
    Ok((best_params, log))
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepResult {
    pub assignments: Vec<(String, String)>,
    pub config: TrainConfig,
    /// Dev nDCG@10 of the best checkpoint, NaN if the cell failed.
    pub dev_ndcg10: f64,
    pub dev_hr10: f64,
    pub error: Option<String>,
}

/// Every assignment of the Cartesian product of `grid`, last key varying
/// fastest.
pub fn grid_cells(grid: &[(String, Vec<String>)]) -> Result<Vec<Vec<(String, String)>>> {
    if grid.is_empty() || grid.iter().any(|(_, values)| values.is_empty()) {
        return Err(Error::Empty("sweep grid"));
    }
    let mut cells = vec![Vec::new()];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c: Vec<(String, String)> = cell.clone();
                c.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Trains one cell. Failures are recorded in the result, not returned.
pub fn run_cell(
    split: &SplitDataset,
    base: &TrainConfig,
    assignments: Vec<(String, String)>,
    observer: &mut dyn TrainObserver,
) -> SweepResult {
    let mut cfg = base.clone();
    let outcome = assignments
        .iter()
        .try_for_each(|(k, v)| cfg.set(k, v))
        .and_then(|_| train(split, &cfg, observer));
    match outcome {
        Ok((_, log)) => {
            let best = log.best();
            SweepResult {
                assignments,
                config: cfg,
                dev_ndcg10: best.map_or(f64::NAN, |r| r.dev_ndcg10),
                dev_hr10: best.map_or(f64::NAN, |r| r.dev_hr10),
                error: None,
            }
        }
        Err(e) => SweepResult {
            assignments,
            config: cfg,
            dev_ndcg10: f64::NAN,
            dev_hr10: f64::NAN,
            error: Some(e.to_string()),
        },
    }
}

/// Sorts by dev nDCG@10, best first, NaN last. Stable, so ties keep grid
/// order.
pub fn rank_results(results: &mut [SweepResult]) {
    results.sort_by(|a, b| match (a.dev_ndcg10.is_nan(), b.dev_ndcg10.is_nan()) {
        (false, false) => b.dev_ndcg10.total_cmp(&a.dev_ndcg10),
        (x, y) => x.cmp(&y),
    });
}

/// Trains every cell of the Cartesian product of `grid` with the base seed
/// and returns the cells ranked by [`rank_results`].
pub fn sweep(
    split: &SplitDataset,
    base: &TrainConfig,
    grid: &[(String, Vec<String>)],
    mut observer_for: impl FnMut(&[(String, String)]) -> alloc::boxed::Box<dyn TrainObserver>,
) -> Result<Vec<SweepResult>> {
    let mut results: Vec<SweepResult> = grid_cells(grid)?
        .into_iter()
        .map(|cell| {
            let mut obs = observer_for(&cell);
            run_cell(split, base, cell, obs.as_mut())
        })
        .collect();
    rank_results(&mut results);
    Ok(results)
}
