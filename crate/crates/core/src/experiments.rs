//! Experiment drivers: fixed-optimizer training runs, agent-gradient
//! collection, gradient histograms and the identity-approximation study.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gridworld::{self, ENV_NAMES};
use crate::meta::{self, TrainingUnit};
use crate::nets::{self, NetSpec};
use crate::optimizers::{self, AgentOptimizer, ClassicalKind, ClassicalState};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iteration: u64,
    pub seed: u64,
    pub env: String,
    pub optimizer: String,
    /// Mean undiscounted return of the episodes that ended in this window.
    #[serde(rename = "return")]
    pub episode_return: Option<f64>,
    pub inner_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub env: String,
    pub optimizer: AgentOptimizer,
    pub seed: u64,
    /// Inner updates (one 20-step trajectory each).
    pub iterations: u64,
    /// Iterations per logged row.
    pub eval_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<TrainRow>,
    /// `(iteration, return)` for every finished episode.
    pub episodes: Vec<(u64, f64)>,
}

impl TrainOutcome {
    /// Mean return of episodes finishing in the last `fraction` of training.
    pub fn tail_return(&self, iterations: u64, fraction: f64) -> Option<f64> {
        let start = (iterations as f64 * (1.0 - fraction)).floor() as u64;
        let tail: Vec<f64> = self
            .episodes
            .iter()
            .filter(|(i, _)| *i >= start)
            .map(|&(_, r)| r)
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

fn optimizer_name(opt: &AgentOptimizer) -> String {
    opt.kind.to_string()
}

/// Train one agent with a fixed optimizer, invoking `observe` on every
/// agent-gradient before it is applied.
pub fn run_training_observed(
    spec: &TrainSpec,
    mut observe: impl FnMut(u64, &ParamTree) -> Result<()>,
) -> Result<TrainOutcome> {
    if spec.eval_every == 0 {
        return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
    }
    let env = gridworld::make_env(&spec.env)?;
    let mut unit = TrainingUnit::new(0, env, &spec.optimizer, 0, meta::unit_rng(spec.seed, 0));
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    let mut window_returns = Vec::new();
    let mut window_loss = 0.0;
    let mut window_len = 0u64;
    for it in 0..spec.iterations {
        let stats = unit.inner_update_observed(&spec.optimizer, |g| observe(it, g))?;
        for &r in &stats.episode_returns {
            episodes.push((it, r));
        }
        window_returns.extend(stats.episode_returns);
        window_loss += stats.loss;
        window_len += 1;
        if (it + 1) % spec.eval_every == 0 || it + 1 == spec.iterations {
            rows.push(TrainRow {
                iteration: it + 1,
                seed: spec.seed,
                env: spec.env.clone(),
                optimizer: optimizer_name(&spec.optimizer),
                episode_return: (!window_returns.is_empty())
                    .then(|| window_returns.iter().sum::<f64>() / window_returns.len() as f64),
                inner_loss: window_loss / window_len as f64,
            });
            window_returns.clear();
            window_loss = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome { rows, episodes })
}

pub fn run_training(spec: &TrainSpec) -> Result<TrainOutcome> {
    run_training_observed(spec, |_, _| Ok(()))
}

/// Receives every agent-gradient of a collection run, flattened.
pub trait GradientSink {
    fn begin(&mut self, _layout: &[(String, usize, usize)]) -> Result<()> {
        Ok(())
    }
    fn push(&mut self, iteration: u64, grads: &[f64]) -> Result<()>;
    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Train with `spec` and stream every coordinate gradient of every inner
/// update into each sink.
pub fn collect_gradients(spec: &TrainSpec, sinks: &mut [&mut dyn GradientSink]) -> Result<TrainOutcome> {
    let env = gridworld::make_env(&spec.env)?;
    let like = crate::agent::init_agent(&env, &mut ChaCha8Rng::seed_from_u64(0));
    let layout = like.layout();
    for s in sinks.iter_mut() {
        s.begin(&layout)?;
    }
    let out = run_training_observed(spec, |it, g| {
        let flat = g.flatten();
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "collected gradient",
            });
        }
        for s in sinks.iter_mut() {
            s.push(it, &flat)?;
        }
        Ok(())
    })?;
    for s in sinks.iter_mut() {
        s.finish()?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub iteration: u64,
    pub coord: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GradCsvRow {
    iteration: u64,
    coord: usize,
    path: String,
    value: f64,
}

/// Scalar agent-gradients annotated with iteration and coordinate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientDataset {
    /// `(path, offset, len)` of the agent parameter layout.
    pub layout: Vec<(String, usize, usize)>,
    pub records: Vec<GradRecord>,
    /// Coordinates to keep; every coordinate when `None`.
    keep: Option<Vec<usize>>,
    /// Skip exact zeros on push.
    nonzero_only: bool,
}

impl GradientDataset {
    /// Collects every coordinate.
    pub fn new() -> Self {
        Self::default()
    }

    /// Collects only `coords` (sorted, deduplicated on entry).
    pub fn with_coords(mut coords: Vec<usize>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        Self {
            keep: Some(coords),
            ..Self::default()
        }
    }

    /// Drop exact-zero gradients as they arrive.
    pub fn nonzero_only(mut self) -> Self {
        self.nonzero_only = true;
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.value)
    }

    pub fn path_of(&self, coord: usize) -> &str {
        self.layout
            .iter()
            .find(|(_, off, len)| coord >= *off && coord < off + len)
            .map_or("", |(p, _, _)| p.as_str())
    }

    /// Per-coordinate sequences in iteration order.
    pub fn series(&self) -> Vec<Vec<f64>> {
        let mut by: BTreeMap<usize, Vec<(u64, f64)>> = BTreeMap::new();
        for r in &self.records {
            by.entry(r.coord).or_default().push((r.iteration, r.value));
        }
        by.into_values()
            .map(|mut s| {
                s.sort_by_key(|&(i, _)| i);
                s.into_iter().map(|(_, v)| v).collect()
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(GradCsvRow {
                iteration: r.iteration,
                coord: r.coord,
                path: self.path_of(r.coord).to_string(),
                value: r.value,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows: Vec<GradCsvRow> = read_csv(path)?;
        let mut spans: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut records = Vec::with_capacity(rows.len());
        for r in rows {
            if !r.value.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient dataset",
                });
            }
            let e = spans.entry(r.path).or_insert((r.coord, r.coord));
            e.0 = e.0.min(r.coord);
            e.1 = e.1.max(r.coord);
            records.push(GradRecord {
                iteration: r.iteration,
                coord: r.coord,
                value: r.value,
            });
        }
        let mut layout: Vec<_> = spans
            .into_iter()
            .map(|(p, (lo, hi))| (p, lo, hi - lo + 1))
            .collect();
        layout.sort_by_key(|(_, off, _)| *off);
        Ok(Self {
            layout,
            records,
            keep: None,
            nonzero_only: false,
        })
    }
}

impl GradientSink for GradientDataset {
    fn begin(&mut self, layout: &[(String, usize, usize)]) -> Result<()> {
        self.layout = layout.to_vec();
        Ok(())
    }

    fn push(&mut self, iteration: u64, grads: &[f64]) -> Result<()> {
        let skip_zero = self.nonzero_only;
        let mut keep = |coord: usize, value: f64| {
            if !(skip_zero && value == 0.0) {
                self.records.push(GradRecord {
                    iteration,
                    coord,
                    value,
                });
            }
        };
        match &self.keep {
            None => grads.iter().enumerate().for_each(|(c, &v)| keep(c, v)),
            Some(coords) => {
                for &coord in coords {
                    let value = *grads.get(coord).ok_or(Error::CoordinateCount {
                        expected: coord + 1,
                        found: grads.len(),
                    })?;
                    keep(coord, value);
                }
            }
        }
        Ok(())
    }
}

/// Streams `iteration,coord,path,value` rows to a writer as they arrive.
pub struct CsvGradientSink<W: Write> {
    writer: csv::Writer<W>,
    paths: Vec<String>,
}

impl CsvGradientSink<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(File::create(path)?))
    }
}

impl<W: Write> CsvGradientSink<W> {
    pub fn new(w: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(w),
            paths: Vec::new(),
        }
    }
}

impl<W: Write> GradientSink for CsvGradientSink<W> {
    fn begin(&mut self, layout: &[(String, usize, usize)]) -> Result<()> {
        self.paths.clear();
        for (p, _, len) in layout {
            self.paths.extend(std::iter::repeat(p.clone()).take(*len));
        }
        Ok(())
    }

    fn push(&mut self, iteration: u64, grads: &[f64]) -> Result<()> {
        for (coord, &value) in grads.iter().enumerate() {
            self.writer.serialize(GradCsvRow {
                iteration,
                coord,
                path: self.paths.get(coord).cloned().unwrap_or_default(),
                value,
            })?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub const HIST_LO: f64 = -16.0;
pub const HIST_HI: f64 = 0.0;
pub const HIST_EPS: f64 = 1e-16;
pub const DEFAULT_BINS: usize = 50;

/// Counts of `log10(|g| + 1e-16)` over uniform bins on `[−16, 0]`; values
/// outside the range land in the nearest end bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mass: f64,
}

impl Histogram {
    pub fn new(bins: usize) -> Self {
        Self {
            counts: vec![0; bins.max(1)],
        }
    }

    pub fn add(&mut self, g: f64) {
        let x = (g.abs() + HIST_EPS).log10();
        let bins = self.counts.len();
        let pos = (x - HIST_LO) / (HIST_HI - HIST_LO) * bins as f64;
        let idx = if pos.is_nan() { 0 } else { (pos.floor().max(0.0) as usize).min(bins - 1) };
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Result<Vec<HistRow>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let bins = self.counts.len() as f64;
        let width = (HIST_HI - HIST_LO) / bins;
        Ok(self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| HistRow {
                bin_lo: HIST_LO + i as f64 * width,
                bin_hi: HIST_LO + (i + 1) as f64 * width,
                mass: c as f64 / total as f64,
            })
            .collect())
    }
}

impl GradientSink for Histogram {
    fn push(&mut self, _iteration: u64, grads: &[f64]) -> Result<()> {
        for &g in grads {
            self.add(g);
        }
        Ok(())
    }
}

pub fn grad_histogram(values: impl IntoIterator<Item = f64>, bins: usize) -> Result<Vec<HistRow>> {
    let mut h = Histogram::new(bins);
    for g in values {
        h.add(g);
    }
    h.rows()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityMode {
    Raw,
    Processed,
    Random,
}

impl std::str::FromStr for IdentityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "processed" => Ok(Self::Processed),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidConfig(format!(
                "unknown identity mode `{other}` (expected raw, processed or random)"
            ))),
        }
    }
}

impl std::fmt::Display for IdentityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Processed => "processed",
            Self::Random => "random",
        })
    }
}

pub const IDENTITY_TOLERANCE: f64 = 0.1;
pub const IDENTITY_LRS: [f64; 4] = [3e-3, 1e-3, 3e-4, 1e-4];

/// `ĝ` lies between `(1 − ε')g` and `(1 + ε')g`.
pub fn identity_correct(g: f64, g_hat: f64) -> bool {
    let a = (1.0 - IDENTITY_TOLERANCE) * g;
    let b = (1.0 + IDENTITY_TOLERANCE) * g;
    a.min(b) <= g_hat && g_hat <= a.max(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityConfig {
    pub epochs: usize,
    pub lrs: Vec<f64>,
    pub seq_len: usize,
    pub batch: usize,
    /// Cap on scalars used; whole coordinate sequences are subsampled.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lrs: IDENTITY_LRS.to_vec(),
            seq_len: 20,
            batch: 64,
            max_samples: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub epoch: usize,
    pub mode: String,
    pub lr: f64,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityResult {
    pub mode: IdentityMode,
    /// Learning rate with the best final accuracy.
    pub lr: f64,
    /// Per-epoch accuracy and loss for the chosen learning rate.
    pub curve: Vec<AccuracyRow>,
    /// Final accuracy for every learning rate tried.
    pub finals: Vec<(f64, f64)>,
}

impl IdentityResult {
    pub fn final_accuracy(&self) -> f64 {
        self.curve.last().map_or(0.0, |r| r.accuracy)
    }
}

fn identity_features(mode: IdentityMode, g: f64) -> Vec<f64> {
    match mode {
        IdentityMode::Processed => {
            let (s, l) = optimizers::process_gradient(g);
            vec![s, l]
        }
        _ => vec![g],
    }
}

fn identity_model(in_dim: usize, rng: &mut ChaCha8Rng) -> ParamTree {
    let mut p = ParamTree::new();
    p.extend_prefixed(
        "lstm",
        &nets::init_with_rng(&NetSpec::Lstm { input: in_dim, hidden: 8 }, rng),
    );
    p.extend_prefixed(
        "mlp",
        &nets::init_with_rng(
            &NetSpec::Mlp {
                sizes: vec![8, 16, 16, 1],
                zero_final: false,
            },
            rng,
        ),
    );
    p
}

/// Loss, gradient and predictions for a batch of chunks `[B][S]`.
fn identity_batch(
    params: &ParamTree,
    mode: IdentityMode,
    chunks: &[&[f64]],
) -> Result<(f64, ParamTree, Vec<Vec<f64>>)> {
    let b = chunks.len();
    let s = chunks[0].len();
    let in_dim = if mode == IdentityMode::Processed { 2 } else { 1 };
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let lstm = vars.subtree("lstm");
    let mlp = vars.subtree("mlp");
    let mut h = tape.constant(Tensor::zeros(&[b, 8]));
    let mut c = tape.constant(Tensor::zeros(&[b, 8]));
    let mut preds = Vec::with_capacity(s);
    for t in 0..s {
        let mut x = Vec::with_capacity(b * in_dim);
        for ch in chunks {
            x.extend(identity_features(mode, ch[t]));
        }
        let x = tape.constant(Tensor::new(vec![b, in_dim], x)?);
        let ((h2, c2), y) = nets::lstm_step(&mut tape, &lstm, (h, c), x)?;
        h = h2;
        c = c2;
        preds.push(nets::mlp_apply(&mut tape, &mlp, y)?);
    }
    let pred = tape.concat(&preds)?;
    let target: Vec<f64> = chunks.iter().flat_map(|ch| ch.iter().copied()).collect();
    let target = tape.constant(Tensor::new(vec![b, s], target)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = tape.value(pred).data().chunks(s).map(<[f64]>::to_vec).collect();
    Ok((value, vars.grads(&grads), out))
}

fn train_identity(
    sequences: &[Vec<f64>],
    mode: IdentityMode,
    lr: f64,
    cfg: &IdentityConfig,
) -> Result<Vec<AccuracyRow>> {
    let chunks: Vec<&[f64]> = sequences
        .iter()
        .flat_map(|s| s.chunks_exact(cfg.seq_len))
        .collect();
    if chunks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let in_dim = if mode == IdentityMode::Processed { 2 } else { 1 };
    let mut params = identity_model(in_dim, &mut rng);
    let mut adam = ClassicalState::zeros_like(&params);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut correct, mut seen, mut loss_sum, mut batches) = (0usize, 0usize, 0.0, 0usize);
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&[f64]> = idx.iter().map(|&i| chunks[i]).collect();
            let (loss, grads, preds) = identity_batch(&params, mode, &batch)?;
            for (ch, p) in batch.iter().zip(&preds) {
                for (&g, &gh) in ch.iter().zip(p) {
                    correct += identity_correct(g, gh) as usize;
                    seen += 1;
                }
            }
            loss_sum += loss;
            batches += 1;
            if !grads.all_finite() {
                return Err(Error::NonFinite {
                    what: "identity model gradient",
                });
            }
            let (delta, next) = optimizers::classical_update(ClassicalKind::Adam, &adam, &grads, lr)?;
            adam = next;
            params = params.zip_map(&delta, |p, d| p + d)?;
        }
        curve.push(AccuracyRow {
            epoch: epoch + 1,
            mode: mode.to_string(),
            lr,
            accuracy: correct as f64 / seen as f64,
            loss: loss_sum / batches as f64,
        });
    }
    Ok(curve)
}

/// Coordinate sequences to learn, or uniform `[−1, 1]` noise of the same
/// shape. Exact zeros are dropped: the ε' criterion accepts only `ĝ = 0` for
/// them. Whole sequences are drawn in seeded random order until
/// `max_samples` values are taken; the last one is cut to fit.
pub fn identity_sequences(
    dataset: &GradientDataset,
    mode: IdentityMode,
    cfg: &IdentityConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut series: Vec<Vec<f64>> = dataset
        .series()
        .into_iter()
        .map(|s| s.into_iter().filter(|&g| g != 0.0).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    if series.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    series.shuffle(&mut rng);
    let mut budget = cfg.max_samples.max(1);
    let mut kept = Vec::new();
    for mut s in series {
        if budget == 0 {
            break;
        }
        s.truncate(budget);
        budget -= s.len();
        kept.push(s);
    }
    if mode == IdentityMode::Random {
        rng.set_stream(2);
        for s in &mut kept {
            for x in s.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
    }
    Ok(kept)
}

/// Fit the LSTM identity model at every learning rate in `cfg.lrs` and keep
/// the one with the best final accuracy.
pub fn identity_experiment(
    dataset: &GradientDataset,
    mode: IdentityMode,
    cfg: &IdentityConfig,
) -> Result<IdentityResult> {
    if cfg.lrs.is_empty() || cfg.seq_len == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig(
            "identity needs learning rates, seq_len >= 1 and batch >= 1".into(),
        ));
    }
    let sequences = identity_sequences(dataset, mode, cfg)?;
    let curves = cfg
        .lrs
        .par_iter()
        .map(|&lr| train_identity(&sequences, mode, lr, cfg))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<(f64, f64)> = cfg
        .lrs
        .iter()
        .zip(&curves)
        .map(|(&lr, c)| (lr, c.last().map_or(0.0, |r| r.accuracy)))
        .collect();
    let best = finals
        .iter()
        .enumerate()
        .fold(0, |best, (i, f)| if f.1 > finals[best].1 { i } else { best });
    Ok(IdentityResult {
        mode,
        lr: cfg.lrs[best],
        curve: curves[best].clone(),
        finals,
    })
}

/// Flat key-value run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Subcommand this file is for; checked against the invoked one when set.
    pub command: Option<String>,
    /// One environment, or for meta-training a comma list or `all6`.
    pub env: String,
    /// `adam` for train and collect-grads, `optim4rl` for meta-train when unset.
    pub optimizer: Option<String>,
    /// Agent step size; the per-environment default when unset.
    pub lr: Option<f64>,
    pub seed: u64,
    /// Consecutive seeds starting at `seed` (train and eval).
    pub seeds: u64,
    pub iterations: u64,
    pub eval_every: u64,
    pub out_dir: PathBuf,
    pub units: usize,
    pub reset_interval: usize,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub dataset: Option<PathBuf>,
    /// Coordinates recorded per iteration by collect-grads; all when unset.
    pub coords: Option<usize>,
    /// collect-grads keeps only nonzero gradients in the dataset; the
    /// histogram still sees every value.
    pub nonzero_only: bool,
    pub mode: String,
    pub epochs: usize,
    pub identity_lrs: Vec<f64>,
    pub max_samples: usize,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            env: "small_dense_short".into(),
            optimizer: None,
            lr: None,
            seed: 0,
            seeds: 1,
            iterations: 1000,
            eval_every: 10,
            out_dir: PathBuf::from("out"),
            units: 4,
            reset_interval: meta::DEFAULT_RESET_INTERVAL,
            inner_steps: meta::DEFAULT_INNER_STEPS,
            meta_lr: meta::DEFAULT_META_LR,
            checkpoint: None,
            checkpoint_every: 100,
            dataset: None,
            coords: None,
            nonzero_only: false,
            mode: "processed".into(),
            epochs: 1000,
            identity_lrs: IDENTITY_LRS.to_vec(),
            max_samples: 1_000_000,
            bins: DEFAULT_BINS,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("field `{name}`: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Environment list, expanding `all6` and comma lists.
    pub fn envs(&self) -> Result<Vec<String>> {
        let envs: Vec<String> = if self.env == "all6" {
            ENV_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            self.env.split(',').map(|s| s.trim().to_string()).collect()
        };
        for e in &envs {
            if !ENV_NAMES.contains(&e.as_str()) {
                return Err(field("env", format!("unknown environment `{e}` (expected one of {ENV_NAMES:?} or all6)")));
            }
        }
        Ok(envs)
    }

    pub fn optimizer_kind(&self, command: &str) -> Result<optimizers::OptimizerKind> {
        let default = if matches!(command, "meta-train" | "eval") { "optim4rl" } else { "adam" };
        self.optimizer
            .as_deref()
            .unwrap_or(default)
            .parse()
            .map_err(|e| field("optimizer", e))
    }

    pub fn validate(&self, command: &str) -> Result<()> {
        if let Some(c) = &self.command {
            if c != command {
                return Err(field("command", format!("file is for `{c}`, invoked `{command}`")));
            }
        }
        let envs = self.envs()?;
        if command != "meta-train" && envs.len() != 1 {
            return Err(field("env", "exactly one environment expected"));
        }
        let kind = self.optimizer_kind(command)?;
        if command == "meta-train" && !matches!(kind, optimizers::OptimizerKind::Learned(_)) {
            return Err(field("optimizer", "meta-train needs a learned optimizer"));
        }
        if let Some(lr) = self.lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(field("lr", "must be a non-negative number"));
            }
        }
        if self.seeds == 0 {
            return Err(field("seeds", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(field("eval_every", "must be >= 1"));
        }
        if !(self.meta_lr.is_finite() && self.meta_lr > 0.0) {
            return Err(field("meta_lr", "must be positive"));
        }
        if self.inner_steps == 0 {
            return Err(field("inner_steps", "must be >= 1"));
        }
        if self.units == 0 || self.reset_interval < self.units {
            return Err(field("reset_interval", "must be >= units >= 1"));
        }
        if self.bins == 0 {
            return Err(field("bins", "must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(field("checkpoint_every", "must be >= 1"));
        }
        self.mode.parse::<IdentityMode>().map_err(|e| field("mode", e))?;
        if self.identity_lrs.is_empty() || self.identity_lrs.iter().any(|&x| !(x > 0.0)) {
            return Err(field("identity_lrs", "must be a non-empty list of positive numbers"));
        }
        if self.max_samples == 0 {
            return Err(field("max_samples", "must be >= 1"));
        }
        if command == "eval" && self.checkpoint.is_none() {
            return Err(field("checkpoint", "eval needs a checkpoint"));
        }
        if matches!(command, "grad-hist" | "identity") && self.dataset.is_none() {
            return Err(field("dataset", format!("{command} needs a dataset")));
        }
        Ok(())
    }
}

/// Seeded uniform choice of `k` distinct coordinates out of `n`.
pub fn sample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut picked = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam_spec(iterations: u64, seed: u64) -> TrainSpec {
        TrainSpec {
            env: "small_dense_short".into(),
            optimizer: AgentOptimizer::classical(ClassicalKind::Adam, 1e-2),
            seed,
            iterations,
            eval_every: 5,
        }
    }

    #[test]
    fn zero_iterations_give_empty_dataset() {
        let mut ds = GradientDataset::new();
        collect_gradients(&adam_spec(0, 1), &mut [&mut ds]).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn dataset_size_is_iterations_times_coords() {
        let mut ds = GradientDataset::new();
        collect_gradients(&adam_spec(3, 1), &mut [&mut ds]).unwrap();
        let coords: usize = ds.layout.iter().map(|l| l.2).sum();
        assert_eq!(ds.len(), 3 * coords);
        let mut again = GradientDataset::new();
        collect_gradients(&adam_spec(3, 1), &mut [&mut again]).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let mut ds = GradientDataset::new();
        let mut sink = CsvGradientSink::create(&path).unwrap();
        collect_gradients(&adam_spec(2, 4), &mut [&mut ds, &mut sink]).unwrap();
        let back = GradientDataset::read_csv(&path).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.layout, ds.layout);
    }

    #[test]
    fn histogram_edges_and_normalisation() {
        let h = grad_histogram(vec![0.0; 10], 50).unwrap();
        assert_eq!(h[0].mass, 1.0);
        let h = grad_histogram(vec![1.0; 10], 50).unwrap();
        assert_eq!(h[49].mass, 1.0);
        let vals: Vec<f64> = (0..1000).map(|i| 10f64.powf(-(i as f64) / 60.0)).collect();
        let h = grad_histogram(vals, 50).unwrap();
        let total: f64 = h.iter().map(|r| r.mass).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(grad_histogram(Vec::new(), 50).is_err());
    }

    #[test]
    fn identity_criterion() {
        assert!(identity_correct(0.3, 0.3));
        assert!(identity_correct(-2.0, -2.0));
        assert!(identity_correct(-2.0, -2.1));
        assert!(!identity_correct(-2.0, -2.3));
        assert!(!identity_correct(-2.0, 2.0));
        assert!(identity_correct(1.0, 1.1));
        assert!(!identity_correct(1e-3, 0.0));
        assert!(identity_correct(0.0, 0.0));
    }

    #[test]
    fn identity_rejects_empty_dataset() {
        let ds = GradientDataset::new();
        assert!(matches!(
            identity_experiment(&ds, IdentityMode::Raw, &IdentityConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn identity_runs_and_is_deterministic() {
        let mut ds = GradientDataset::with_coords(vec![0, 5, 17, 200]);
        collect_gradients(&adam_spec(40, 2), &mut [&mut ds]).unwrap();
        let cfg = IdentityConfig {
            epochs: 3,
            lrs: vec![1e-3, 3e-3],
            ..IdentityConfig::default()
        };
        let a = identity_experiment(&ds, IdentityMode::Processed, &cfg).unwrap();
        let b = identity_experiment(&ds, IdentityMode::Processed, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.curve.len(), 3);
        assert!(a.curve.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    }

    fn toy_dataset() -> GradientDataset {
        let mut ds = GradientDataset::new();
        for (it, row) in [[0.5, 0.0, -0.25], [0.0, 0.0, 0.125], [0.75, 0.0, 0.0]].iter().enumerate() {
            ds.push(it as u64, row).unwrap();
        }
        ds
    }

    #[test]
    fn identity_sequences_drop_zeros_and_respect_budget() {
        let ds = toy_dataset();
        let cfg = IdentityConfig::default();
        let mut seqs = identity_sequences(&ds, IdentityMode::Raw, &cfg).unwrap();
        seqs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(seqs, vec![vec![-0.25, 0.125], vec![0.5, 0.75]]);

        let small = IdentityConfig {
            max_samples: 3,
            ..IdentityConfig::default()
        };
        let seqs = identity_sequences(&ds, IdentityMode::Raw, &small).unwrap();
        assert_eq!(seqs.iter().map(Vec::len).sum::<usize>(), 3);

        let noise = identity_sequences(&ds, IdentityMode::Random, &cfg).unwrap();
        assert_eq!(noise.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2]);
        assert!(noise.iter().flatten().all(|x| (-1.0..1.0).contains(x)));

        let mut zeros = GradientDataset::new();
        zeros.push(0, &[0.0, 0.0]).unwrap();
        assert!(matches!(
            identity_sequences(&zeros, IdentityMode::Raw, &cfg),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn nonzero_only_sink_skips_exact_zeros() {
        let mut ds = GradientDataset::with_coords(vec![0, 1]).nonzero_only();
        ds.push(0, &[0.0, 2.0, 3.0]).unwrap();
        ds.push(1, &[1.0, 0.0, 0.0]).unwrap();
        let got: Vec<_> = ds.records.iter().map(|r| (r.iteration, r.coord, r.value)).collect();
        assert_eq!(got, vec![(0, 1, 2.0), (1, 0, 1.0)]);
    }

    #[test]
    fn training_csv_is_reproducible() {
        let a = run_training(&adam_spec(20, 9)).unwrap();
        let b = run_training(&adam_spec(20, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        write_csv(&path, &a.rows).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("iteration,seed,env,optimizer,return,inner_loss\n"));
        let back: Vec<TrainRow> = read_csv(&path).unwrap();
        assert_eq!(back, a.rows);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("colour = 3").is_err());
        let c = RunConfig::from_toml("env = \"big_dense_long\"\nlr = 0.003\n").unwrap();
        assert_eq!(c.env, "big_dense_long");
        c.validate("train").unwrap();
        let bad = RunConfig {
            optimizer: Some("momentum".into()),
            ..RunConfig::default()
        };
        let msg = bad.validate("train").unwrap_err().to_string();
        assert!(msg.contains("optimizer"));
        let all = RunConfig {
            env: "all6".into(),
            units: 6,
            ..RunConfig::default()
        };
        assert_eq!(all.envs().unwrap().len(), 6);
        assert!(all.validate("train").is_err());
        all.validate("meta-train").unwrap();
        let classical = RunConfig {
            optimizer: Some("adam".into()),
            ..all.clone()
        };
        assert!(classical.validate("meta-train").is_err());
        let text = all.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), all);
    }

    #[test]
    fn coordinate_sampling_is_seeded() {
        let a = sample_coords(1000, 10, 3);
        assert_eq!(a, sample_coords(1000, 10, 3));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_coords(5, 10, 0), vec![0, 1, 2, 3, 4]);
    }
}
