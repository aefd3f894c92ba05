//! Pipeline meta-training of learned optimizers.
//!
//! Each training unit owns an agent, an environment and an optimizer state.
//! One meta step runs `M` inner updates per unit on a fresh tape with φ as
//! leaves, evaluates the actor loss of the final parameters on a validation
//! trajectory, and averages the resulting ∇φ over units in unit-id order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::{self, EnvRunner, LossWeights, Trajectory, ROLLOUT_STEPS};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gridworld::{self, GridworldConfig, ENV_NAMES};
use crate::nets::{BankVars, CoordinateRule, HiddenStateBank};
use crate::optimizers::{
    self, AgentOptimizer, BoundLearned, ClassicalKind, ClassicalState, LearnedKind,
    OptimizerState, RNN_HIDDEN,
};
use crate::params::{ParamTree, VarTree};
use crate::tensor::Tensor;

pub const DEFAULT_META_LR: f64 = 1e-4;
pub const DEFAULT_RESET_INTERVAL: usize = 512;
pub const DEFAULT_INNER_STEPS: usize = 4;

/// Evenly spaced reset offsets `round((i−1)(m−1)/(n−1))`, rounding half up.
pub fn pipeline_offsets(n: usize, m: usize) -> Result<Vec<usize>> {
    if n == 0 || m < n {
        return Err(Error::InvalidConfig(format!(
            "pipeline needs 1 <= units <= reset interval, got n={n}, m={m}"
        )));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let d = n - 1;
    Ok((0..n).map(|i| (2 * i * (m - 1) + d) / (2 * d)).collect())
}

/// Unit with offset `r` resets at iterations `t ≡ r (mod m)`.
pub fn should_reset(offset: usize, t: u64, m: usize) -> bool {
    t % m as u64 == offset as u64
}

/// Ages (iterations since the last reset) of every unit at each of
/// `0..steps`, obtained by running the reset rule forward.
pub fn simulate_ages(offsets: &[usize], m: usize, steps: u64) -> Vec<Vec<u64>> {
    let mut ages = vec![0u64; offsets.len()];
    let mut out = Vec::with_capacity(steps as usize);
    for t in 0..steps {
        for (age, &r) in ages.iter_mut().zip(offsets) {
            if should_reset(r, t, m) {
                *age = 0;
            } else if t > 0 {
                *age += 1;
            }
        }
        out.push(ages.clone());
    }
    out
}

/// Default agent step size: 1e-2 on the small worlds, 3e-3 on the big ones.
pub fn default_agent_lr(config: &GridworldConfig) -> f64 {
    if config.is_small() {
        1e-2
    } else {
        3e-3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    pub units: usize,
    pub reset_interval: usize,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Units are assigned round-robin over this list.
    pub envs: Vec<String>,
    pub kind: LearnedKind,
    /// Overrides [`default_agent_lr`] for every unit.
    pub agent_lr: Option<f64>,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            units: 4,
            reset_interval: DEFAULT_RESET_INTERVAL,
            inner_steps: DEFAULT_INNER_STEPS,
            meta_lr: DEFAULT_META_LR,
            iterations: 1000,
            seed: 0,
            envs: vec!["small_dense_short".into()],
            kind: LearnedKind::Optim4Rl,
            agent_lr: None,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        pipeline_offsets(self.units, self.reset_interval)?;
        if self.inner_steps == 0 {
            return Err(Error::InvalidConfig("inner_steps must be >= 1".into()));
        }
        if !(self.meta_lr.is_finite() && self.meta_lr > 0.0) {
            return Err(Error::InvalidConfig("meta_lr must be positive".into()));
        }
        if let Some(lr) = self.agent_lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidConfig("agent_lr must be non-negative".into()));
            }
        }
        if self.envs.is_empty() {
            return Err(Error::InvalidConfig("at least one env is required".into()));
        }
        for env in &self.envs {
            if !ENV_NAMES.contains(&env.as_str()) {
                return Err(Error::UnknownEnv(env.clone()));
            }
        }
        Ok(())
    }
}

/// Per-unit random stream: one ChaCha stream per unit id under a shared seed.
pub fn unit_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng
}

/// Agent, task and optimizer state, trained and reset together.
#[derive(Debug, Clone)]
pub struct TrainingUnit {
    pub id: usize,
    pub runner: EnvRunner,
    pub params: ParamTree,
    pub state: OptimizerState,
    pub alpha: f64,
    pub offset: usize,
    pub local_iteration: u64,
    pub rng: ChaCha8Rng,
    pub diverged: bool,
    pub resets: u64,
    /// Undiscounted returns of episodes completed since the last report.
    pub recent_returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub episode_returns: Vec<f64>,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

impl TrainingUnit {
    pub fn new(
        id: usize,
        config: GridworldConfig,
        optimizer: &AgentOptimizer,
        offset: usize,
        mut rng: ChaCha8Rng,
    ) -> Self {
        let params = agent::init_agent(&config, &mut rng);
        let runner = EnvRunner::new(config, &mut rng);
        let state = optimizer.init_state(&params);
        Self {
            id,
            runner,
            params,
            state,
            alpha: optimizer.alpha,
            offset,
            local_iteration: 0,
            rng,
            diverged: false,
            resets: 0,
            recent_returns: Vec::new(),
        }
    }

    /// Fresh agent parameters, a fresh episode and a zeroed optimizer state.
    pub fn reset(&mut self) {
        self.params = agent::init_agent(&self.runner.config, &mut self.rng);
        self.runner.reset(&mut self.rng);
        self.state = match &self.state {
            OptimizerState::Classical(_) => {
                OptimizerState::Classical(ClassicalState::zeros_like(&self.params))
            }
            OptimizerState::Learned(bank) => OptimizerState::Learned(HiddenStateBank::zeros(
                self.params.numel(),
                bank.hidden(),
            )),
        };
        self.local_iteration = 0;
        self.diverged = false;
        self.resets += 1;
    }

    /// Reset when `t ≡ offset (mod m)`, or when the unit has diverged.
    pub fn maybe_reset(&mut self, t: u64, m: usize) -> bool {
        if self.diverged || should_reset(self.offset, t, m) {
            self.reset();
            true
        } else {
            false
        }
    }

    /// One trajectory, one gradient, one optimizer step with a fixed rule.
    pub fn inner_update(&mut self, optimizer: &AgentOptimizer) -> Result<InnerStats> {
        self.inner_update_observed(optimizer, |_| Ok(()))
    }

    /// [`Self::inner_update`], handing the agent-gradient to `observe` first.
    pub fn inner_update_observed(
        &mut self,
        optimizer: &AgentOptimizer,
        mut observe: impl FnMut(&ParamTree) -> Result<()>,
    ) -> Result<InnerStats> {
        let traj = agent::rollout(&mut self.runner, &self.params, ROLLOUT_STEPS, &mut self.rng)?;
        self.recent_returns.extend_from_slice(&traj.episode_returns);
        let result = agent::a2c_grad(&self.params, &self.runner.config, &traj, LossWeights::default())
            .and_then(|(loss, grads)| {
                observe(&grads)?;
                let delta = optimizer.update(&mut self.state, &grads)?;
                let next = self.params.zip_map(&delta, |p, d| p + d)?;
                if !next.all_finite() {
                    return Err(Error::NonFinite {
                        what: "agent parameters",
                    });
                }
                Ok((loss, grads.l2_norm(), next))
            });
        self.local_iteration += 1;
        match result {
            Ok((loss, grad_norm, next)) => {
                self.params = next;
                Ok(InnerStats {
                    loss,
                    grad_norm,
                    episode_returns: traj.episode_returns,
                })
            }
            Err(e) if is_divergence(&e) => {
                self.diverged = true;
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    fn bank(&self) -> Result<&HiddenStateBank> {
        match &self.state {
            OptimizerState::Learned(bank) => Ok(bank),
            OptimizerState::Classical(_) => Err(Error::InvalidConfig(
                "meta-training needs a learned optimizer state".into(),
            )),
        }
    }

    /// `M` differentiable inner updates followed by the outer loss on a
    /// validation trajectory. Advances the unit to `θ_{i+M}`.
    pub fn meta_window(
        &mut self,
        kind: LearnedKind,
        phi: &ParamTree,
        inner_steps: usize,
        record: bool,
    ) -> Result<WindowOutcome> {
        let bank0 = self.bank()?.clone();
        let mut unroll = MetaUnroll::new(Tape::new(), kind, phi, &self.params, &bank0);
        let mut recorded = Vec::new();
        let mut inner_loss = 0.0;
        let mut agent_grad_norm = 0.0;
        let mut returns = Vec::new();
        for _ in 0..inner_steps {
            let params = unroll.params()?;
            let traj = agent::rollout(&mut self.runner, &params, ROLLOUT_STEPS, &mut self.rng)?;
            returns.extend_from_slice(&traj.episode_returns);
            self.local_iteration += 1;
            let step = agent::a2c_grad(&params, &self.runner.config, &traj, LossWeights::default())
                .and_then(|(loss, grads)| {
                    unroll.inner_step(&grads, self.alpha)?;
                    Ok((loss, grads))
                });
            match step {
                Ok((loss, grads)) => {
                    inner_loss += loss / inner_steps as f64;
                    agent_grad_norm += grads.l2_norm() / inner_steps as f64;
                    if record {
                        recorded.push(grads);
                    }
                }
                Err(e) if is_divergence(&e) => return Ok(self.diverge(returns)),
                Err(e) => return Err(e),
            }
        }
        let params = unroll.params()?;
        if !params.all_finite() {
            return Ok(self.diverge(returns));
        }
        let validation = agent::rollout(&mut self.runner, &params, ROLLOUT_STEPS, &mut self.rng)?;
        returns.extend_from_slice(&validation.episode_returns);
        self.recent_returns.extend_from_slice(&returns);
        let outer = unroll.outer_loss(&self.runner.config, &validation)?;
        let outer_loss = unroll.tape.value(outer).item();
        let meta_grad = unroll.phi_grads(outer)?;
        let bank = unroll.bank_values();
        let record = record.then(|| WindowRecord {
            params0: self.params.clone(),
            bank0,
            grads: recorded,
            validation,
            stops: unroll.tape.stop_values().to_vec(),
        });
        self.params = params;
        self.state = OptimizerState::Learned(bank);
        Ok(WindowOutcome {
            id: self.id,
            meta_grad: Some(meta_grad),
            inner_loss,
            outer_loss,
            agent_grad_norm,
            returns,
            diverged: false,
            record,
        })
    }

    fn diverge(&mut self, returns: Vec<f64>) -> WindowOutcome {
        self.diverged = true;
        self.recent_returns.extend_from_slice(&returns);
        WindowOutcome {
            id: self.id,
            meta_grad: None,
            inner_loss: f64::NAN,
            outer_loss: f64::NAN,
            agent_grad_norm: f64::NAN,
            returns,
            diverged: true,
            record: None,
        }
    }
}

/// Everything needed to rebuild one window's outer loss as a pure function
/// of φ: the starting point, the (stop-gradiented) agent-gradients, the
/// validation trajectory, and the stop-gradient values seen on the tape.
#[derive(Debug, Clone)]
pub struct WindowRecord {
    pub params0: ParamTree,
    pub bank0: HiddenStateBank,
    pub grads: Vec<ParamTree>,
    pub validation: Trajectory,
    pub stops: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct WindowOutcome {
    pub id: usize,
    pub meta_grad: Option<ParamTree>,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub agent_grad_norm: f64,
    pub returns: Vec<f64>,
    pub diverged: bool,
    pub record: Option<WindowRecord>,
}

/// The differentiable chain `θ_{k+1} = θ_k + Δθ_k(φ)` on one tape. θ is a
/// single flat vector; the agent-gradients fed to the rule are constants.
pub struct MetaUnroll {
    pub tape: Tape,
    pub phi: VarTree,
    rule: BoundLearned,
    like: ParamTree,
    theta: Var,
    bank: BankVars,
}

impl MetaUnroll {
    pub fn new(
        mut tape: Tape,
        kind: LearnedKind,
        phi: &ParamTree,
        params: &ParamTree,
        bank: &HiddenStateBank,
    ) -> Self {
        let phi_vars = phi.bind(&mut tape);
        Self::with_phi(tape, kind, phi_vars, params, bank)
    }

    /// Like [`MetaUnroll::new`] with φ already on `tape`.
    pub fn with_phi(
        mut tape: Tape,
        kind: LearnedKind,
        phi_vars: VarTree,
        params: &ParamTree,
        bank: &HiddenStateBank,
    ) -> Self {
        let theta = tape.constant(Tensor::vector(params.flatten()));
        let bank = bank.bind_constant(&mut tape);
        Self {
            tape,
            rule: BoundLearned {
                kind,
                phi: phi_vars.clone(),
            },
            phi: phi_vars,
            like: params.clone(),
            theta,
            bank,
        }
    }

    /// Current `θ` values.
    pub fn params(&self) -> Result<ParamTree> {
        self.like.unflatten(self.tape.value(self.theta).data())
    }

    pub fn inner_step(&mut self, grads: &ParamTree, alpha: f64) -> Result<()> {
        self.like.check_same_structure(grads)?;
        let g = self.tape.constant(Tensor::vector(grads.flatten()));
        let (delta, bank) = self.rule.update(&mut self.tape, g, self.bank, alpha)?;
        self.theta = self.tape.add(self.theta, delta)?;
        self.bank = bank;
        Ok(())
    }

    /// Actor loss of the current `θ(φ)` on `traj`.
    pub fn outer_loss(&mut self, config: &GridworldConfig, traj: &Trajectory) -> Result<Var> {
        let vars = VarTree::split_flat(&mut self.tape, self.theta, &self.like)?;
        agent::actor_loss(&mut self.tape, &vars, config, traj)
    }

    pub fn phi_grads(&self, root: Var) -> Result<ParamTree> {
        let grads = self.tape.backward(root)?;
        Ok(self.phi.grads(&grads))
    }

    pub fn bank_values(&self) -> HiddenStateBank {
        HiddenStateBank::from_vars(&self.tape, self.bank)
    }
}

/// Rebuild a recorded window's outer loss at `phi`. With `frozen`, every
/// stop-gradient node replays its recorded value, which makes the result a
/// smooth function of φ whose derivative is exactly what backward computes.
pub fn replay_outer_loss(
    kind: LearnedKind,
    phi: &ParamTree,
    config: &GridworldConfig,
    record: &WindowRecord,
    alpha: f64,
    frozen: bool,
) -> Result<(f64, ParamTree)> {
    let tape = if frozen {
        Tape::with_frozen_stops(record.stops.clone())
    } else {
        Tape::new()
    };
    let mut unroll = MetaUnroll::new(tape, kind, phi, &record.params0, &record.bank0);
    for g in &record.grads {
        unroll.inner_step(g, alpha)?;
    }
    let root = unroll.outer_loss(config, &record.validation)?;
    let value = unroll.tape.value(root).item();
    Ok((value, unroll.phi_grads(root)?))
}

/// The same graph as [`replay_outer_loss`], built on a caller's tape with φ
/// bound by the caller.
pub fn window_outer_loss(
    tape: &mut Tape,
    kind: LearnedKind,
    phi: &VarTree,
    config: &GridworldConfig,
    record: &WindowRecord,
    alpha: f64,
) -> Result<Var> {
    let owned = std::mem::take(tape);
    let mut unroll = MetaUnroll::with_phi(owned, kind, phi.clone(), &record.params0, &record.bank0);
    let root = (|| {
        for g in &record.grads {
            unroll.inner_step(g, alpha)?;
        }
        unroll.outer_loss(config, &record.validation)
    })();
    *tape = unroll.tape;
    root
}

/// φ and the Adam state that trains it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub kind: LearnedKind,
    pub phi: ParamTree,
    pub adam: ClassicalState,
    pub iteration: u64,
    pub skipped_updates: u64,
}

impl MetaState {
    pub fn new(kind: LearnedKind, seed: u64) -> Self {
        let phi = optimizers::init_meta(kind, &mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            kind,
            adam: ClassicalState::zeros_like(&phi),
            phi,
            iteration: 0,
            skipped_updates: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitMetrics {
    pub unit: usize,
    pub env: String,
    /// Mean return of episodes finished during the window, if any.
    pub episode_return: Option<f64>,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub agent_grad_norm: f64,
    pub meta_grad_norm: f64,
    pub diverged: bool,
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaStepMetrics {
    pub iteration: u64,
    pub units: Vec<UnitMetrics>,
    pub meta_grad_norm: f64,
    pub skipped: bool,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// One outer update: reset due units, run every unit's window (in
/// parallel), average ∇φ in unit-id order and take an Adam step on φ.
pub fn meta_step(
    units: &mut [TrainingUnit],
    meta: &mut MetaState,
    config: &MetaTrainConfig,
) -> Result<MetaStepMetrics> {
    let t = meta.iteration;
    let resets: Vec<(usize, bool)> = units
        .iter_mut()
        .map(|u| (u.id, u.maybe_reset(t, config.reset_interval)))
        .collect();
    let mut outcomes = units
        .par_iter_mut()
        .map(|u| u.meta_window(meta.kind, &meta.phi, config.inner_steps, false))
        .collect::<Result<Vec<_>>>()?;
    outcomes.sort_by_key(|o| o.id);

    let mut sum: Option<ParamTree> = None;
    let mut count = 0usize;
    for o in &outcomes {
        if let Some(g) = &o.meta_grad {
            sum = Some(match sum {
                None => g.clone(),
                Some(s) => s.zip_map(g, |a, b| a + b)?,
            });
            count += 1;
        }
    }
    let mut skipped = true;
    let mut norm = f64::NAN;
    if let Some(sum) = sum {
        let avg = sum.map(|t| t.map(|x| x / count as f64));
        norm = avg.l2_norm();
        if avg.all_finite() {
            let (delta, adam) =
                optimizers::classical_update(ClassicalKind::Adam, &meta.adam, &avg, config.meta_lr)?;
            let phi = meta.phi.zip_map(&delta, |p, d| p + d)?;
            if phi.all_finite() {
                meta.phi = phi;
                meta.adam = adam;
                skipped = false;
            }
        }
    }
    if skipped {
        meta.skipped_updates += 1;
    }

    let env_of = |id: usize| {
        units
            .iter()
            .find(|u| u.id == id)
            .map(|u| u.runner.config.name.clone())
            .unwrap_or_default()
    };
    let metrics = MetaStepMetrics {
        iteration: t,
        units: outcomes
            .iter()
            .map(|o| UnitMetrics {
                unit: o.id,
                env: env_of(o.id),
                episode_return: mean(&o.returns),
                inner_loss: o.inner_loss,
                outer_loss: o.outer_loss,
                agent_grad_norm: o.agent_grad_norm,
                meta_grad_norm: o.meta_grad.as_ref().map_or(f64::NAN, ParamTree::l2_norm),
                diverged: o.diverged,
                reset: resets.iter().any(|&(id, r)| id == o.id && r),
            })
            .collect(),
        meta_grad_norm: norm,
        skipped,
    };
    meta.iteration += 1;
    Ok(metrics)
}

/// Units plus meta state, built deterministically from a config.
#[derive(Debug, Clone)]
pub struct MetaTrainer {
    pub config: MetaTrainConfig,
    pub units: Vec<TrainingUnit>,
    pub meta: MetaState,
}

impl MetaTrainer {
    pub fn new(config: MetaTrainConfig) -> Result<Self> {
        config.validate()?;
        let offsets = pipeline_offsets(config.units, config.reset_interval)?;
        let meta = MetaState::new(config.kind, config.seed);
        let mut units = Vec::with_capacity(config.units);
        for (id, &offset) in offsets.iter().enumerate() {
            let env = gridworld::make_env(&config.envs[id % config.envs.len()])?;
            let alpha = config.agent_lr.unwrap_or_else(|| default_agent_lr(&env));
            let opt = AgentOptimizer::learned(config.kind, meta.phi.clone(), alpha);
            units.push(TrainingUnit::new(id, env, &opt, offset, unit_rng(config.seed, id)));
        }
        Ok(Self {
            config,
            units,
            meta,
        })
    }

    pub fn step(&mut self) -> Result<MetaStepMetrics> {
        meta_step(&mut self.units, &mut self.meta, &self.config)
    }

    /// Step until `config.iterations` outer updates have been taken.
    pub fn run(&mut self, mut on_step: impl FnMut(&MetaStepMetrics) -> Result<()>) -> Result<()> {
        while self.meta.iteration < self.config.iterations {
            let m = self.step()?;
            on_step(&m)?;
        }
        Ok(())
    }

    /// The trained rule, frozen, at step size `alpha`.
    pub fn frozen_optimizer(&self, alpha: f64) -> AgentOptimizer {
        AgentOptimizer::learned(self.meta.kind, self.meta.phi.clone(), alpha)
    }
}

/// A zeroed hidden-state bank sized for `params`.
pub fn fresh_bank(params: &ParamTree) -> HiddenStateBank {
    HiddenStateBank::zeros(params.numel(), RNN_HIDDEN)
}
