use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mars::commands::{self, EvalArgs, ExportArgs, GradcheckArgs, SplitArgs, SweepArgs, SynthArgs, TrainArgs};
use mars::io::DelimitedFormat;
use mars_core::rng::{stream_seed, Stream};
use mars_core::{EvalProtocol, EvalTarget, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "mars", version, about = "Multi-facet metric learning for top-N recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Leave-one-out split of an interaction file into train/dev/test manifests.
    Split(SplitCmd),
    /// Train a model on a split directory.
    Train(TrainCmd),
    /// Rank held-out items against sampled negatives.
    Eval(EvalCmd),
    /// Train every cell of a hyperparameter grid.
    Sweep(SweepCmd),
    /// Write facet-specific embeddings as delimited text.
    Export(ExportCmd),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckCmd),
    /// Generate the three-user conflict dataset.
    SynthConflict(SynthCmd),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 is the deterministic default.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Common {
    fn base_config(&self) -> Result<(TrainConfig, bool)> {
        self.config_from(TrainConfig::default())
    }

    /// Config file over `cfg`, then `--seed`.
    fn config_from(&self, mut cfg: TrainConfig) -> Result<(TrainConfig, bool)> {
        let mut k_set = false;
        if let Some(path) = &self.config {
            mars::config::apply_file(&mut cfg, path)?;
            let text = mars::io::read_file(path)?;
            k_set = mars::config::parse_pairs(&text, path)?.iter().any(|(k, _)| k.trim() == "k");
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.workers == 0 {
            bail!("--workers must be at least 1");
        }
        Ok((cfg, k_set))
    }
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lambda_pull: Option<f64>,
    #[arg(long)]
    lambda_facet: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    fixed_margin: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_neg: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_negatives: Option<usize>,
    /// Plain Riemannian SGD without the calibration multiplier.
    #[arg(long)]
    no_calibrate: bool,
    /// Drop the item half of the spherical facet-separating loss.
    #[arg(long)]
    no_facet_loss_items: bool,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set(key, &v).with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
            Ok(())
        };
        let f = |x: Option<f64>| x.map(|v| format!("{v:?}"));
        let u = |x: Option<usize>| x.map(|v| v.to_string());
        set("variant", self.variant.clone())?;
        set("k", u(self.k))?;
        set("dim", u(self.dim))?;
        set("learning_rate", f(self.lr))?;
        set("lr_decay", f(self.lr_decay))?;
        set("lambda_pull", f(self.lambda_pull))?;
        set("lambda_facet", f(self.lambda_facet))?;
        set("alpha", f(self.alpha))?;
        set("beta", f(self.beta))?;
        set("fixed_margin", f(self.fixed_margin))?;
        set("batch_size", u(self.batch_size))?;
        set("epochs", u(self.epochs))?;
        set("n_neg", u(self.n_neg))?;
        set("patience", u(self.patience))?;
        set("eval_every", u(self.eval_every))?;
        set("eval_negatives", u(self.eval_negatives))?;
        if self.no_calibrate {
            cfg.calibrate = false;
        }
        if self.no_facet_loss_items {
            cfg.facet_loss_items = false;
        }
        Ok(())
    }

    /// Resolves the full training config and applies the CML facet rule.
    fn resolve(&self, common: &Common) -> Result<TrainConfig> {
        let (mut cfg, k_in_file) = common.base_config()?;
        self.apply(&mut cfg)?;
        if cfg.variant == Variant::Cml && cfg.k != 1 {
            if self.k.is_some() || k_in_file {
                eprintln!("warning: --variant cml forces k = 1 (k = {} ignored)", cfg.k);
            }
            cfg.k = 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SplitCmd {
    /// Interaction file with `user item [timestamp]` rows.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `tab`, `comma`, `space`, `whitespace` or a single character.
    #[arg(long, default_value = "tab")]
    delimiter: String,
    #[arg(long)]
    skip_header: bool,
    #[arg(long, default_value_t = 0)]
    user_col: usize,
    #[arg(long, default_value_t = 1)]
    item_col: usize,
    #[arg(long, default_value_t = 2)]
    timestamp_col: usize,
    /// Ignore timestamps and hold out random items.
    #[arg(long)]
    no_timestamp: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainCmd {
    /// Split directory written by `split`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `test` or `dev`.
    #[arg(long, default_value = "test")]
    target: String,
    #[arg(long, default_value_t = 100)]
    negatives: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    cutoffs: Vec<usize>,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-user rank dump.
    #[arg(long)]
    ranks: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key=v1,v2,...`; repeat for more keys.
    #[arg(long = "grid", required = true)]
    grid: Vec<String>,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ExportCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split directory whose id maps give raw ids.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 7)]
    users: usize,
    #[arg(long, default_value_t = 11)]
    items: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Test hook: perturb one analytic coordinate, `LABEL` or `LABEL=DELTA`.
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long, default_value_t = 50)]
    blocks: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn parse_delimiter(s: &str) -> Result<Option<char>> {
    Ok(match s {
        "tab" | "\\t" => Some('\t'),
        "comma" => Some(','),
        "space" => Some(' '),
        "whitespace" | "ws" => None,
        other => {
            let mut chars = other.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Some(c),
                _ => bail!("unknown delimiter `{other}`"),
            }
        }
    })
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => mars::io::write_file(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Split(c) => {
            let (cfg, _) = c.common.base_config()?;
            let format = DelimitedFormat {
                delimiter: parse_delimiter(&c.delimiter)?,
                skip_header: c.skip_header,
                user_col: c.user_col,
                item_col: c.item_col,
                timestamp_col: (!c.no_timestamp).then_some(c.timestamp_col),
            };
            let s = commands::split(&SplitArgs { input: c.input, out: c.out.clone(), format, seed: cfg.seed })?;
            eprintln!(
                "{} users, {} items, {} pairs ({} train / {} dev / {} test) -> {}",
                s.n_users,
                s.n_items,
                s.pairs,
                s.train_pairs,
                s.dev_pairs,
                s.test_pairs,
                c.out.display()
            );
        }
        Command::Train(c) => {
            let cfg = c.flags.resolve(&c.common)?;
            let out = commands::train(&TrainArgs { data: c.data, out: c.out, config: cfg }, c.quiet)?;
            match out.log.best() {
                Some(b) => eprintln!(
                    "best epoch {}: dev HR@10 {:.4} nDCG@10 {:.4} -> {}",
                    b.epoch,
                    b.dev_hr10,
                    b.dev_ndcg10,
                    out.best_checkpoint.display()
                ),
                None => eprintln!("no epochs run -> {}", out.best_checkpoint.display()),
            }
        }
        Command::Eval(c) => {
            let (cfg, _) = c.common.base_config()?;
            let target = match c.target.as_str() {
                "test" => EvalTarget::Test,
                "dev" => EvalTarget::Dev,
                other => bail!("unknown target `{other}` (expected test or dev)"),
            };
            let protocol = EvalProtocol {
                n_negatives: c.negatives,
                cutoffs: c.cutoffs,
                seed: stream_seed(cfg.seed, Stream::Eval),
            };
            if protocol.cutoff_exceeds_pool() {
                eprintln!("warning: a cutoff exceeds the {} sampled negatives", protocol.n_negatives);
            }
            let args = EvalArgs {
                data: c.data,
                checkpoint: c.checkpoint,
                target,
                protocol,
                workers: c.common.workers,
                ranks_out: c.ranks,
            };
            let report = commands::evaluate(&args)?;
            if report.report.users_short_of_negatives > 0 {
                eprintln!("warning: {} users had fewer than {} eligible negatives", report.report.users_short_of_negatives, args.protocol.n_negatives);
            }
            write_json(&report, c.out.as_ref())?;
        }
        Command::Sweep(c) => {
            let base = c.flags.resolve(&c.common)?;
            let grid = c.grid.iter().map(|g| commands::parse_grid_entry(g)).collect::<Result<Vec<_>, _>>()?;
            let results = commands::sweep(
                &SweepArgs { data: c.data, out: c.out.clone(), base, grid, workers: c.common.workers },
                c.quiet,
            )?;
            if let Some(best) = results.first() {
                let label: Vec<String> = best.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect();
                eprintln!("best: {}  dev nDCG@10 {:.4}", label.join(" "), best.dev_ndcg10);
            }
        }
        Command::Export(c) => {
            c.common.base_config()?;
            let files = commands::export(&ExportArgs { checkpoint: c.checkpoint, out: c.out, data: c.data })?;
            eprintln!("wrote {} files", files.len());
        }
        Command::Gradcheck(c) => {
            let small = TrainConfig { k: 3, dim: 5, lambda_pull: 0.5, lambda_facet: 0.5, ..TrainConfig::default() };
            let (mut cfg, _) = c.common.config_from(small)?;
            c.flags.apply(&mut cfg)?;
            if cfg.variant == Variant::Cml {
                cfg.k = 1;
            }
            let corrupt = match &c.corrupt {
                Some(spec) => Some(match spec.rsplit_once('=') {
                    Some((label, delta)) => (label.to_string(), delta.parse().context("--corrupt delta")?),
                    None => (spec.clone(), 1e-3),
                }),
                None => None,
            };
            let args = GradcheckArgs {
                variant: cfg.variant,
                n_users: c.users,
                n_items: c.items,
                dim: cfg.dim,
                k: cfg.k,
                seed: cfg.seed,
                h: c.h,
                rel_tol: c.tol,
                loss: cfg.loss_config(),
                corrupt,
                ..GradcheckArgs::default()
            };
            let out = commands::gradcheck(&args)?;
            for t in &out.terms {
                let status = if t.report.passed { "ok" } else { "FAIL" };
                eprintln!("{:<6} {:<4} worst error/tolerance {:.3e} at {}", t.term, status, t.report.max_error, t.report.worst_coord);
                for g in &t.report.groups {
                    eprintln!("         {:<13} {:.3e}  {}", g.group, g.worst_error, g.worst_coord);
                }
            }
            write_json(&out, c.out.as_ref())?;
            return Ok(out.passed);
        }
        Command::SynthConflict(c) => {
            let (cfg, _) = c.common.base_config()?;
            let ds = commands::synth_conflict(&SynthArgs { blocks: c.blocks, seed: cfg.seed, out: c.out.clone() })?;
            eprintln!("{} users, {} items, {} pairs -> {}", ds.n_users(), ds.n_items(), ds.len(), c.out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
