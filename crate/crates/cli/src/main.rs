use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use optim4rl::checkpoint;
use optim4rl::experiments::{
    self, CsvGradientSink, GradientDataset, GradientSink, Histogram, IdentityConfig, IdentityMode,
    RunConfig, TrainRow, TrainSpec,
};
use optim4rl::gridworld;
use optim4rl::meta::{self, MetaTrainConfig, MetaTrainer};
use optim4rl::optimizers::{self, AgentOptimizer, OptimizerKind};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "optim4rl", version, about = "Learned optimizers for reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an A2C agent with a fixed optimizer and log returns.
    Train(Opts),
    /// Meta-train a learned optimizer with pipeline training.
    MetaTrain(Opts),
    /// Train fresh agents with the frozen optimizer from a checkpoint.
    Eval(Opts),
    /// Train an agent and record its agent-gradients.
    CollectGrads(Opts),
    /// Histogram of log10(|g| + 1e-16) over a gradient dataset.
    GradHist(Opts),
    /// Fit an LSTM to the identity map on a gradient dataset.
    Identity(Opts),
}

impl Command {
    fn parts(&self) -> (&'static str, &Opts) {
        match self {
            Self::Train(o) => ("train", o),
            Self::MetaTrain(o) => ("meta-train", o),
            Self::Eval(o) => ("eval", o),
            Self::CollectGrads(o) => ("collect-grads", o),
            Self::GradHist(o) => ("grad-hist", o),
            Self::Identity(o) => ("identity", o),
        }
    }
}

/// Every flag overrides the key of the same name in `--config`.
#[derive(Args, Debug, Default)]
struct Opts {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment; for meta-train a comma list or `all6`.
    #[arg(long, visible_alias = "envs")]
    env: Option<String>,
    /// sgd, rmsprop, adam, optim4rl, linear or l2l.
    #[arg(long)]
    optimizer: Option<String>,
    /// Agent step size.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<u64>,
    /// Inner updates (train, eval, collect-grads) or outer updates (meta-train).
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    reset_interval: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    meta_lr: Option<f64>,
    /// Checkpoint to evaluate or resume from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Gradient dataset CSV.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Coordinates recorded per iteration by collect-grads (default: all).
    #[arg(long)]
    coords: Option<usize>,
    /// collect-grads records only nonzero gradients.
    #[arg(long)]
    nonzero_only: bool,
    /// raw, processed or random.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    identity_lrs: Option<Vec<f64>>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
}

macro_rules! overlay {
    ($cfg:ident, $opts:ident, $($f:ident),*) => {
        $( if let Some(v) = $opts.$f.clone() { $cfg.$f = v.into(); } )*
    };
}

fn resolve(command: &str, opts: &Opts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overlay!(
        cfg, opts, env, seed, seeds, iterations, eval_every, out_dir, units,
        reset_interval, inner_steps, meta_lr, checkpoint_every, mode, epochs, identity_lrs,
        max_samples, bins
    );
    if opts.optimizer.is_some() {
        cfg.optimizer = opts.optimizer.clone();
    }
    if opts.lr.is_some() {
        cfg.lr = opts.lr;
    }
    if opts.checkpoint.is_some() {
        cfg.checkpoint = opts.checkpoint.clone();
    }
    if opts.dataset.is_some() {
        cfg.dataset = opts.dataset.clone();
    }
    if opts.coords.is_some() {
        cfg.coords = opts.coords;
    }
    if opts.nonzero_only {
        cfg.nonzero_only = true;
    }
    cfg.validate(command)?;
    cfg.command = Some(command.to_string());
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn agent_lr(cfg: &RunConfig, env: &str) -> Result<f64> {
    match cfg.lr {
        Some(lr) => Ok(lr),
        None => Ok(meta::default_agent_lr(&gridworld::make_env(env)?)),
    }
}

/// The optimizer named in the config. Learned rules take φ from the
/// checkpoint when one is given, and start from zero-initialised heads
/// otherwise.
fn build_optimizer(cfg: &RunConfig, command: &str, env: &str) -> Result<AgentOptimizer> {
    let alpha = agent_lr(cfg, env)?;
    Ok(match cfg.optimizer_kind(command)? {
        OptimizerKind::Classical(kind) => AgentOptimizer::classical(kind, alpha),
        OptimizerKind::Learned(kind) => {
            let phi = match &cfg.checkpoint {
                Some(p) => {
                    let t = checkpoint::load(p)?;
                    if t.meta.kind != kind {
                        bail!("checkpoint holds a different learned optimizer than `{kind:?}`");
                    }
                    t.meta.phi
                }
                None => optimizers::init_meta(kind, &mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed)),
            };
            AgentOptimizer::learned(kind, phi, alpha)
        }
    })
}

fn train_seeds(cfg: &RunConfig, optimizer: &AgentOptimizer) -> Result<Vec<TrainRow>> {
    let env = cfg.envs()?.remove(0);
    let mut rows = Vec::new();
    for seed in cfg.seed..cfg.seed + cfg.seeds {
        let spec = TrainSpec {
            env: env.clone(),
            optimizer: optimizer.clone(),
            seed,
            iterations: cfg.iterations,
            eval_every: cfg.eval_every,
        };
        let out = experiments::run_training(&spec)
            .with_context(|| format!("training seed {seed}"))?;
        let tail = out.tail_return(cfg.iterations, 0.1);
        eprintln!(
            "seed {seed}: mean return over last 10% = {}",
            tail.map_or("n/a".into(), |r| format!("{r:.3}"))
        );
        rows.extend(out.rows);
    }
    Ok(rows)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let env = cfg.envs()?.remove(0);
    let opt = build_optimizer(cfg, "train", &env)?;
    let rows = train_seeds(cfg, &opt)?;
    let path = cfg.out_dir.join("train.csv");
    experiments::write_csv(&path, &rows)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.checkpoint.as_ref().expect("validated");
    let trainer = checkpoint::load(ckpt)?;
    let env = cfg.envs()?.remove(0);
    let opt = trainer.frozen_optimizer(agent_lr(cfg, &env)?);
    let rows = train_seeds(cfg, &opt)?;
    let path = cfg.out_dir.join("eval.csv");
    experiments::write_csv(&path, &rows)?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct MetaRow {
    iteration: u64,
    unit: usize,
    env: String,
    #[serde(rename = "return")]
    episode_return: Option<f64>,
    inner_loss: f64,
    outer_loss: f64,
    agent_grad_norm: f64,
    meta_grad_norm: f64,
    diverged: bool,
    reset: bool,
}

fn cmd_meta_train(cfg: &RunConfig) -> Result<()> {
    let OptimizerKind::Learned(kind) = cfg.optimizer_kind("meta-train")? else {
        bail!("meta-train needs a learned optimizer");
    };
    let mcfg = MetaTrainConfig {
        units: cfg.units,
        reset_interval: cfg.reset_interval,
        inner_steps: cfg.inner_steps,
        meta_lr: cfg.meta_lr,
        iterations: cfg.iterations,
        seed: cfg.seed,
        envs: cfg.envs()?,
        kind,
        agent_lr: cfg.lr,
    };
    let mut trainer = match &cfg.checkpoint {
        Some(p) => {
            let mut t = checkpoint::load(p)?;
            if t.config.iterations > cfg.iterations || !same_run(&t.config, &mcfg) {
                bail!("checkpoint {} was written by a different run configuration", p.display());
            }
            t.config.iterations = cfg.iterations;
            t
        }
        None => MetaTrainer::new(mcfg)?,
    };
    let ckpt_path = cfg.out_dir.join("checkpoint.bin");
    let csv_path = cfg.out_dir.join("meta.csv");
    let resumed = cfg.checkpoint.is_some() && csv_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resumed)
        .write(true)
        .truncate(!resumed)
        .open(&csv_path)?;
    let mut writer = csv::WriterBuilder::new().has_headers(!resumed).from_writer(file);
    let every = cfg.checkpoint_every;
    let total = trainer.config.iterations;
    while trainer.meta.iteration < total {
        let m = trainer.step()?;
        for u in &m.units {
            writer.serialize(MetaRow {
                iteration: m.iteration,
                unit: u.unit,
                env: u.env.clone(),
                episode_return: u.episode_return,
                inner_loss: u.inner_loss,
                outer_loss: u.outer_loss,
                agent_grad_norm: u.agent_grad_norm,
                meta_grad_norm: u.meta_grad_norm,
                diverged: u.diverged,
                reset: u.reset,
            })?;
        }
        if trainer.meta.iteration % every == 0 || trainer.meta.iteration == total {
            writer.flush()?;
            checkpoint::save(&ckpt_path, &trainer)?;
            eprintln!(
                "iteration {}/{}: meta-grad norm {:.3e}, skipped updates {}",
                trainer.meta.iteration, total, m.meta_grad_norm, trainer.meta.skipped_updates
            );
        }
    }
    writer.flush()?;
    checkpoint::save(&ckpt_path, &trainer)?;
    println!("{}", ckpt_path.display());
    Ok(())
}

fn same_run(a: &MetaTrainConfig, b: &MetaTrainConfig) -> bool {
    a.units == b.units
        && a.reset_interval == b.reset_interval
        && a.inner_steps == b.inner_steps
        && a.meta_lr == b.meta_lr
        && a.seed == b.seed
        && a.envs == b.envs
        && a.kind == b.kind
        && a.agent_lr == b.agent_lr
}

fn cmd_collect(cfg: &RunConfig) -> Result<()> {
    let env = cfg.envs()?.remove(0);
    let opt = build_optimizer(cfg, "collect-grads", &env)?;
    let spec = TrainSpec {
        env: env.clone(),
        optimizer: opt,
        seed: cfg.seed,
        iterations: cfg.iterations,
        eval_every: cfg.eval_every,
    };
    let grads_path = cfg.out_dir.join("grads.csv");
    let mut hist = Histogram::new(cfg.bins);
    let out = if cfg.coords.is_none() && !cfg.nonzero_only {
        let mut sink = CsvGradientSink::create(&grads_path)?;
        experiments::collect_gradients(&spec, &mut [&mut sink, &mut hist])?
    } else {
        let mut ds = match cfg.coords {
            Some(k) => {
                let n = optimizer_coords(&env)?;
                GradientDataset::with_coords(experiments::sample_coords(n, k, cfg.seed))
            }
            None => GradientDataset::new(),
        };
        if cfg.nonzero_only {
            ds = ds.nonzero_only();
        }
        let out = experiments::collect_gradients(&spec, &mut [&mut ds, &mut hist])?;
        ds.write_csv(&grads_path)?;
        out
    };
    experiments::write_csv(&cfg.out_dir.join("train.csv"), &out.rows)?;
    if hist.total() > 0 {
        experiments::write_csv(&cfg.out_dir.join("histogram.csv"), &hist.rows()?)?;
    }
    println!("{}", grads_path.display());
    Ok(())
}

fn optimizer_coords(env: &str) -> Result<usize> {
    let cfg = gridworld::make_env(env)?;
    Ok(optim4rl::agent::init_agent(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).numel())
}

fn load_dataset(cfg: &RunConfig) -> Result<GradientDataset> {
    let path = cfg.dataset.as_ref().expect("validated");
    GradientDataset::read_csv(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn cmd_grad_hist(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let mut hist = Histogram::new(cfg.bins);
    hist.push(0, &ds.values().collect::<Vec<_>>())?;
    let path = cfg.out_dir.join("histogram.csv");
    experiments::write_csv(&path, &hist.rows()?)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_identity(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let mode: IdentityMode = cfg.mode.parse()?;
    let icfg = IdentityConfig {
        epochs: cfg.epochs,
        lrs: cfg.identity_lrs.clone(),
        max_samples: cfg.max_samples,
        seed: cfg.seed,
        ..IdentityConfig::default()
    };
    let result = experiments::identity_experiment(&ds, mode, &icfg)?;
    for (lr, acc) in &result.finals {
        eprintln!("lr {lr:e}: final accuracy {acc:.4}");
    }
    let path = cfg.out_dir.join(format!("identity_{mode}.csv"));
    experiments::write_csv(&path, &result.curve)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (name, opts) = cli.command.parts();
    let cfg = resolve(name, opts)?;
    prepare_out(&cfg)?;
    match &cli.command {
        Command::Train(_) => cmd_train(&cfg),
        Command::MetaTrain(_) => cmd_meta_train(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::CollectGrads(_) => cmd_collect(&cfg),
        Command::GradHist(_) => cmd_grad_hist(&cfg),
        Command::Identity(_) => cmd_identity(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
