//! Subcommand implementations. Each takes plain arguments and writes its
//! outputs under a directory so that the binary and the tests share one code
//! path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use mars_core::eval::{user_rank, UserRank};
use mars_core::objective::term_gradients;
use mars_core::optim::{compare_gradients, coordinates, grad_value, GradCheckReport};
use mars_core::rng::{seeded, stream_seed, Stream};
use mars_core::{
    compute_adaptive_margins, finite_difference_gradient, generate_conflict_dataset, init_params,
    leave_one_out_split, total_loss, total_loss_gradients, EvalProtocol, EvalReport, EvalTarget,
    Interaction, InteractionDataset, LossConfig, ModelParams, SplitDataset, Term, TrainConfig,
    TrainObserver, TrainRecord, Triplet, Variant,
};
use rand::Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::io::{self, DelimitedFormat, IdMap};
use crate::{config, to_json_pretty, Error};

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------- split

pub struct SplitArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub format: DelimitedFormat,
    pub seed: u64,
}

pub fn split(args: &SplitArgs) -> Result<io::SplitSummary, Error> {
    let loaded = io::load_interactions(&args.input, &args.format)?;
    let split = leave_one_out_split(&loaded.dataset, stream_seed(args.seed, Stream::Split));
    let summary = io::summarize(&args.input.display().to_string(), args.seed, &loaded, &split);
    io::write_split(&args.out, &loaded, &split, &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- train

pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.tsv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const RUN_FILE: &str = "run.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: TrainConfig,
}

/// One line of the training log. Wall-clock time goes to a separate file
/// so the log itself is reproducible byte for byte.
#[derive(Debug, Serialize)]
struct LogLine<'a> {
    epoch: usize,
    loss_total: f64,
    loss_push: f64,
    loss_pull: f64,
    loss_facet: f64,
    dev_hr10: f64,
    dev_ndcg10: f64,
    best: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<&'a str>,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    data: String,
    n_users: usize,
    n_items: usize,
    train_pairs: usize,
    config: BTreeMap<&'static str, String>,
    best_epoch: Option<usize>,
    best_dev_hr10: Option<f64>,
    best_dev_ndcg10: Option<f64>,
    evaluations: usize,
    stopped_early: bool,
    checkpoint: &'a str,
}

struct FileObserver {
    start: Instant,
    out: PathBuf,
    log: String,
    timing: String,
    seed: u64,
    error: Option<Error>,
    quiet: bool,
}

impl TrainObserver for FileObserver {
    fn elapsed_seconds(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_evaluation(&mut self, r: &TrainRecord, params: &ModelParams, is_best: bool) {
        let name = format!("{CHECKPOINT_DIR}/epoch_{:04}.json", r.epoch);
        let saved = Checkpoint::new(params.clone(), self.seed, Some(r.epoch)).save(&self.out.join(&name));
        if let Err(e) = saved {
            self.error.get_or_insert(e);
        }
        let line = LogLine {
            epoch: r.epoch,
            loss_total: r.loss.total,
            loss_push: r.loss.push,
            loss_pull: r.loss.pull,
            loss_facet: r.loss.facet,
            dev_hr10: r.dev_hr10,
            dev_ndcg10: r.dev_ndcg10,
            best: is_best,
            checkpoint: Some(&name),
        };
        self.log.push_str(&serde_json::to_string(&line).expect("plain struct"));
        self.log.push('\n');
        let _ = writeln!(self.timing, "{}\t{:.3}", r.epoch, r.seconds);
        if !self.quiet {
            eprintln!(
                "epoch {:>3}  loss {:.5}  dev HR@10 {:.4}  nDCG@10 {:.4}{}",
                r.epoch,
                r.loss.total,
                r.dev_hr10,
                r.dev_ndcg10,
                if is_best { "  *" } else { "" }
            );
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: mars_core::TrainLog,
    pub best_checkpoint: PathBuf,
}

pub fn train(args: &TrainArgs, quiet: bool) -> Result<TrainOutcome, Error> {
    let cfg = &args.config;
    cfg.validate()?;
    let (split, summary) = io::read_split(&args.data)?;
    create_dir(&args.out.join(CHECKPOINT_DIR))?;
    io::write_file(&args.out.join(RESOLVED_CONFIG_FILE), &config::render(cfg))?;

    let mut obs = FileObserver {
        start: Instant::now(),
        out: args.out.clone(),
        log: String::new(),
        timing: String::from("epoch\tseconds\n"),
        seed: cfg.seed,
        error: None,
        quiet,
    };
    let (params, log) = mars_core::train(&split, cfg, &mut obs)?;
    if let Some(e) = obs.error {
        return Err(e);
    }
    io::write_file(&args.out.join(LOG_FILE), &obs.log)?;
    io::write_file(&args.out.join(TIMING_FILE), &obs.timing)?;
    let best_path = args.out.join(BEST_CHECKPOINT);
    Checkpoint::new(params.clone(), cfg.seed, log.best_epoch).save(&best_path)?;

    let best = log.best();
    let run = RunRecord {
        data: args.data.display().to_string(),
        n_users: summary.n_users,
        n_items: summary.n_items,
        train_pairs: split.train.len(),
        config: cfg.to_pairs().into_iter().collect(),
        best_epoch: log.best_epoch,
        best_dev_hr10: best.map(|r| r.dev_hr10),
        best_dev_ndcg10: best.map(|r| r.dev_ndcg10),
        evaluations: log.records.len(),
        stopped_early: log.stopped_early,
        checkpoint: BEST_CHECKPOINT,
    };
    io::write_file(&args.out.join(RUN_FILE), &to_json_pretty(&run)?)?;
    Ok(TrainOutcome { params, log, best_checkpoint: best_path })
}

// ---------------------------------------------------------------- eval

pub struct EvalArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub target: EvalTarget,
    pub protocol: EvalProtocol,
    pub workers: usize,
    pub ranks_out: Option<PathBuf>,
}

/// Report written by `eval`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub target: &'static str,
    pub n_negatives: usize,
    pub seed: u64,
    pub report: EvalReport,
    pub consistent: bool,
}

/// Ranks every held-out user, fanning out over `workers` threads. Each
/// user draws negatives from their own substream, so the result does not
/// depend on the worker count.
pub fn rank_users(
    params: &ModelParams,
    split: &SplitDataset,
    protocol: &EvalProtocol,
    target: EvalTarget,
    workers: usize,
) -> Result<Vec<UserRank>, Error> {
    let users: Vec<usize> = (0..split.train.n_users()).collect();
    let chunk = users.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<UserRank>, mars_core::Error>> = thread::scope(|s| {
        let handles: Vec<_> = users
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for &u in part {
                        if let Some(r) = user_rank(params, split, protocol, target, u)? {
                            out.push(r);
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut ranks = Vec::with_capacity(users.len());
    for p in parts {
        ranks.extend(p?);
    }
    Ok(ranks)
}

pub fn evaluate(args: &EvalArgs) -> Result<EvalOutput, Error> {
    let (split, _) = io::read_split(&args.data)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    if ck.n_users != split.train.n_users() || ck.n_items != split.train.n_items() {
        return Err(Error::Invalid(format!(
            "checkpoint is {}x{} but the split is {}x{}",
            ck.n_users,
            ck.n_items,
            split.train.n_users(),
            split.train.n_items()
        )));
    }
    let ranks = rank_users(&ck.params, &split, &args.protocol, args.target, args.workers)?;
    if let Some(path) = &args.ranks_out {
        let mut text = String::from("user\titem\trank\tnegatives\n");
        for r in &ranks {
            let _ = writeln!(text, "{}\t{}\t{}\t{}", r.user, r.item, r.rank, r.negatives);
        }
        io::write_file(path, &text)?;
    }
    let report = EvalReport::from_ranks(&ranks, &args.protocol);
    Ok(EvalOutput {
        target: match args.target {
            EvalTarget::Dev => "dev",
            EvalTarget::Test => "test",
        },
        n_negatives: args.protocol.n_negatives,
        seed: args.protocol.seed,
        consistent: report.is_consistent(),
        report,
    })
}

// ---------------------------------------------------------------- sweep

pub const SWEEP_FILE: &str = "sweep.jsonl";

pub struct SweepArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub base: TrainConfig,
    pub grid: Vec<(String, Vec<String>)>,
    pub workers: usize,
}

/// Parses `key=v1,v2,...`.
pub fn parse_grid_entry(s: &str) -> Result<(String, Vec<String>), Error> {
    let (k, vs) = s.split_once('=').ok_or_else(|| Error::Invalid(format!("grid entry `{s}` is not key=v1,v2")))?;
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Invalid(format!("grid entry `{s}` has no values")));
    }
    Ok((k.trim().to_string(), values))
}

pub fn sweep(args: &SweepArgs, quiet: bool) -> Result<Vec<mars_core::SweepResult>, Error> {
    args.base.validate()?;
    let (split, _) = io::read_split(&args.data)?;
    let cells = mars_core::grid_cells(&args.grid)?;
    let workers = args.workers.max(1).min(cells.len());
    let mut results: Vec<Option<mars_core::SweepResult>> = vec![None; cells.len()];
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (split, cells, base) = (&split, &cells, &args.base);
                s.spawn(move || {
                    let mut done = Vec::new();
                    for (i, cell) in cells.iter().enumerate().skip(w).step_by(workers) {
                        let r = mars_core::run_cell(split, base, cell.clone(), &mut mars_core::trainer::Silent);
                        if !quiet {
                            let label: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
                            eprintln!("{}  dev nDCG@10 {:.4}", label.join(" "), r.dev_ndcg10);
                        }
                        done.push((i, r));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut results: Vec<mars_core::SweepResult> = results.into_iter().map(|r| r.expect("every cell ran")).collect();
    mars_core::rank_results(&mut results);

    create_dir(&args.out)?;
    let mut text = String::new();
    for r in &results {
        #[derive(Serialize)]
        struct Line<'a> {
            assignments: BTreeMap<&'a str, &'a str>,
            dev_ndcg10: Option<f64>,
            dev_hr10: Option<f64>,
            error: &'a Option<String>,
        }
        let finite = |x: f64| x.is_finite().then_some(x);
        let line = Line {
            assignments: r.assignments.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect(),
            dev_ndcg10: finite(r.dev_ndcg10),
            dev_hr10: finite(r.dev_hr10),
            error: &r.error,
        };
        text.push_str(&serde_json::to_string(&line).expect("plain struct"));
        text.push('\n');
    }
    io::write_file(&args.out.join(SWEEP_FILE), &text)?;
    Ok(results)
}

// ---------------------------------------------------------------- export

pub const UNIVERSAL_FILE: &str = "universal.tsv";
pub const WEIGHTS_FILE: &str = "facet_weights.tsv";

pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    /// Split directory whose id maps supply raw ids; dense ids otherwise.
    pub data: Option<PathBuf>,
}

pub fn facet_file_name(k: usize) -> String {
    format!("facet_{k}.tsv")
}

fn row_line(out: &mut String, tag: &str, row: &[f64]) {
    out.push_str(tag);
    for x in row {
        let _ = write!(out, "\t{x:?}");
    }
    out.push('\n');
}

/// Writes `facet_{k}.tsv` for every facet (users then items, ids tagged
/// `u:` and `i:`), the universal rows, and the per-user facet weights.
pub fn export(args: &ExportArgs) -> Result<Vec<PathBuf>, Error> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let p = &ck.params;
    let (users, items) = match &args.data {
        Some(dir) => {
            let u = dir.join(io::USER_MAP_FILE);
            let i = dir.join(io::ITEM_MAP_FILE);
            (IdMap::from_tsv(&io::read_file(&u)?, &u)?, IdMap::from_tsv(&io::read_file(&i)?, &i)?)
        }
        None => {
            let dense = |n: usize| {
                let mut m = IdMap::default();
                (0..n).for_each(|i| {
                    m.intern(&i.to_string());
                });
                m
            };
            (dense(p.n_users()), dense(p.n_items()))
        }
    };
    if users.len() != p.n_users() || items.len() != p.n_items() {
        return Err(Error::Invalid("id maps do not match the checkpoint".into()));
    }
    create_dir(&args.out)?;
    let mut facets = vec![String::new(); p.n_facets()];
    let mut universal = String::new();
    for u in 0..p.n_users() {
        let tag = format!("u:{}", users.raw(u));
        let f = p.user_facets(u);
        for (k, text) in facets.iter_mut().enumerate() {
            row_line(text, &tag, f.facet(k));
        }
        row_line(&mut universal, &tag, p.user_emb.row(u));
    }
    for v in 0..p.n_items() {
        let tag = format!("i:{}", items.raw(v));
        let f = p.item_facets(v);
        for (k, text) in facets.iter_mut().enumerate() {
            row_line(text, &tag, f.facet(k));
        }
        row_line(&mut universal, &tag, p.item_emb.row(v));
    }
    let mut weights = String::new();
    for u in 0..p.n_users() {
        row_line(&mut weights, &format!("u:{}", users.raw(u)), &p.facet_weights(u));
    }
    let mut written = Vec::new();
    for (k, text) in facets.iter().enumerate() {
        let path = args.out.join(facet_file_name(k));
        io::write_file(&path, text)?;
        written.push(path);
    }
    for (name, text) in [(UNIVERSAL_FILE, &universal), (WEIGHTS_FILE, &weights)] {
        let path = args.out.join(name);
        io::write_file(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads an exported table back as `(tag, row)` pairs.
pub fn read_export(path: &Path) -> Result<Vec<(String, Vec<f64>)>, Error> {
    let text = io::read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split('\t');
        let tag = fields.next().unwrap_or_default().to_string();
        let row: Result<Vec<f64>, _> = fields.map(str::parse).collect();
        let row = row.map_err(|_| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "bad number".into() })?;
        out.push((tag, row));
    }
    Ok(out)
}

// ---------------------------------------------------------------- gradcheck

pub struct GradcheckArgs {
    pub variant: Variant,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub k: usize,
    pub seed: u64,
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub loss: LossConfig,
    /// Test hook: add this offset to one analytic coordinate, named by its
    /// label (e.g. `user_emb[0,1]`).
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            variant: Variant::Mars,
            n_users: 7,
            n_items: 11,
            dim: 5,
            k: 3,
            seed: 0,
            h: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            loss: LossConfig { lambda_pull: 0.5, lambda_facet: 0.5, ..LossConfig::default() },
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckTermReport {
    pub term: &'static str,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutput {
    pub variant: Variant,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub k: usize,
    pub seed: u64,
    pub h: f64,
    pub rel_tol: f64,
    pub coordinates: usize,
    pub terms: Vec<GradcheckTermReport>,
    pub passed: bool,
}

/// Random model and batch for gradient checking. Logits and projections
/// are perturbed away from their initial values so no branch is
/// degenerate, and margins are lifted so most hinges are active.
pub fn gradcheck_problem(args: &GradcheckArgs) -> Result<(ModelParams, Vec<Triplet>, mars_core::AdaptiveMargins), Error> {
    let (n, m) = (args.n_users, args.n_items);
    if n == 0 || m < 2 {
        return Err(Error::Invalid("gradcheck needs at least one user and two items".into()));
    }
    let mut rng = seeded(stream_seed(args.seed, Stream::Synthetic));
    let mut params = init_params(n, m, args.dim, args.k, args.variant, stream_seed(args.seed, Stream::Init))?;
    if args.variant.trains_projections() {
        for x in params.facet_logits.as_mut_slice() {
            *x = rng.gen_range(-1.0..1.0);
        }
        for p in params.user_proj.iter_mut().chain(params.item_proj.iter_mut()) {
            for x in p.as_mut_slice() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let mut pairs = Vec::new();
    for u in 0..n {
        let count = rng.gen_range(1..m);
        let mut items: Vec<usize> = (0..m).collect();
        for i in 0..count {
            let j = rng.gen_range(i..m);
            items.swap(i, j);
        }
        pairs.extend(items[..count].iter().map(|&v| Interaction::new(u, v)));
    }
    let ds = InteractionDataset::new(n, m, pairs)?;
    let mut batch = Vec::new();
    for u in 0..n {
        for _ in 0..2 {
            let pos = ds.items_of_user(u);
            let p = pos[rng.gen_range(0..pos.len())];
            let neg = mars_core::dataset::sample_negative(pos, m, &mut rng);
            batch.push(Triplet { user: u, pos: p, neg });
        }
    }
    let mut margins = compute_adaptive_margins(&ds);
    for g in &mut margins.gamma {
        *g += 2.0;
    }
    Ok((params, batch, margins))
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<GradcheckOutput, Error> {
    let (params, batch, margins) = gradcheck_problem(args)?;
    let cfg = &args.loss;
    let coords = coordinates(&params);
    let corrupt = match &args.corrupt {
        Some((label, delta)) => {
            let c = coords
                .iter()
                .find(|c| c.label() == *label)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("no coordinate named `{label}`")))?;
            Some((c, *delta))
        }
        None => None,
    };
    let terms: [(&'static str, Option<Term>); 4] =
        [("push", Some(Term::Push)), ("pull", Some(Term::Pull)), ("facet", Some(Term::Facet)), ("total", None)];
    let mut out = Vec::new();
    for (name, term) in terms {
        let mut analytic = match term {
            Some(t) => term_gradients(&params, &batch, &margins, cfg, t)?.1,
            None => total_loss_gradients(&params, &batch, &margins, cfg)?.1,
        };
        if let Some((c, delta)) = corrupt {
            let value = grad_value(&analytic, c) + delta;
            set_grad(&mut analytic, c, value);
        }
        let numeric = finite_difference_gradient(
            |p| {
                let b = total_loss(p, &batch, &margins, cfg)?;
                Ok(match term {
                    Some(Term::Push) => b.push,
                    Some(Term::Pull) => b.pull,
                    Some(Term::Facet) => b.facet,
                    None => b.total,
                })
            },
            &params,
            args.h,
        )?;
        let report = compare_gradients(&analytic, &numeric, &params, args.rel_tol, args.abs_floor);
        out.push(GradcheckTermReport { term: name, report });
    }
    Ok(GradcheckOutput {
        variant: args.variant,
        n_users: args.n_users,
        n_items: args.n_items,
        dim: args.dim,
        k: args.k,
        seed: args.seed,
        h: args.h,
        rel_tol: args.rel_tol,
        coordinates: coords.len(),
        passed: out.iter().all(|t| t.report.passed),
        terms: out,
    })
}

fn set_grad(grads: &mut mars_core::Gradients, c: mars_core::optim::Coord, value: f64) {
    use mars_core::optim::ParamGroup;
    let slot = match c.group {
        ParamGroup::UserEmb => &mut grads.user_emb.row_mut(c.row)[c.col],
        ParamGroup::ItemEmb => &mut grads.item_emb.row_mut(c.row)[c.col],
        ParamGroup::UserProj => &mut grads.user_proj[c.facet].row_mut(c.row)[c.col],
        ParamGroup::ItemProj => &mut grads.item_proj[c.facet].row_mut(c.row)[c.col],
        ParamGroup::FacetLogits => &mut grads.facet_logits.row_mut(c.row)[c.col],
    };
    *slot = value;
}

// ---------------------------------------------------------------- synth-conflict

pub const CONFLICT_FILE: &str = "conflict.tsv";
pub const ROLES_FILE: &str = "roles.tsv";

pub struct SynthArgs {
    pub blocks: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes the conflict interactions as `user<TAB>item<TAB>timestamp` plus
/// the A/B/C role of every user.
pub fn synth_conflict(args: &SynthArgs) -> Result<InteractionDataset, Error> {
    let ds = generate_conflict_dataset(args.blocks, stream_seed(args.seed, Stream::Synthetic))?;
    create_dir(&args.out)?;
    let mut text = String::new();
    for p in ds.pairs() {
        let _ = match p.timestamp {
            Some(t) => writeln!(text, "{}\t{}\t{}", p.user, p.item, t),
            None => writeln!(text, "{}\t{}", p.user, p.item),
        };
    }
    io::write_file(&args.out.join(CONFLICT_FILE), &text)?;
    let mut roles = String::new();
    for u in 0..ds.n_users() {
        let _ = writeln!(roles, "{u}\t{:?}", mars_core::dataset::conflict_role(u));
    }
    io::write_file(&args.out.join(ROLES_FILE), &roles)?;
    Ok(ds)
}
