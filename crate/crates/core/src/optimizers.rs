//! Update functions `U(g, h) -> (Δθ, h')`.
//!
//! Classical rules (SGD, RMSProp, Adam) work directly on parameter trees. The
//! learned rules are small recurrent networks applied to every coordinate
//! with shared meta-parameters φ; they are written against the tape so the
//! same code serves plain updates and meta-gradient unrolls.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{self, BankVars, CoordinateRule, HiddenStateBank, NetSpec};
use crate::params::{ParamTree, VarTree};
use crate::tensor::Tensor;

/// ε inside `log(|g| + ε)`.
pub const LOG_EPS: f64 = 1e-18;
/// ε in the `√(v + ε)` denominator.
pub const DENOM_EPS: f64 = 1e-18;
pub const GRAD_CLIP: f64 = 1.0;
/// Bias added before the sign so `m_sign` starts positive.
pub const SIGN_BIAS: f64 = 1.0;
pub const RNN_HIDDEN: usize = 8;
pub const MLP_HIDDEN: [usize; 2] = [16, 16];

pub const RMSPROP_BETA: f64 = 0.99;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const CLASSICAL_EPS: f64 = 1e-8;

/// `(sign(g), ln(|g| + 1e-18))`, with `sign(0) = 0`.
pub fn process_gradient(g: f64) -> (f64, f64) {
    let sign = if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    };
    (sign, (g.abs() + LOG_EPS).ln())
}

/// Tape version of [`process_gradient`] over a `[C]` batch; both outputs are
/// stop-gradiented and returned as `[C, 1]` columns.
pub fn process_gradient_tape(tape: &mut Tape, g: Var) -> Result<(Var, Var)> {
    let n = tape.value(g).numel();
    let sign = tape.value(g).map(|x| process_gradient(x).0);
    let sign = tape.constant(sign);
    let sign = tape.stop_gradient(sign)?;
    let abs = tape.abs(g);
    let shifted = tape.add_scalar(abs, LOG_EPS);
    let log = tape.log(shifted);
    let log = tape.stop_gradient(log)?;
    let sign = tape.reshape(sign, &[n, 1])?;
    let log = tape.reshape(log, &[n, 1])?;
    Ok((sign, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassicalKind {
    Sgd,
    RmsProp,
    Adam,
}

/// Moments for RMSProp / Adam. SGD carries an empty state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalState {
    pub m: ParamTree,
    pub v: ParamTree,
    pub step: u64,
}

impl ClassicalState {
    pub fn zeros_like(params: &ParamTree) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

pub fn classical_update(
    kind: ClassicalKind,
    state: &ClassicalState,
    grads: &ParamTree,
    alpha: f64,
) -> Result<(ParamTree, ClassicalState)> {
    grads.check_same_structure(&state.m)?;
    let step = state.step + 1;
    match kind {
        ClassicalKind::Sgd => Ok((
            grads.map(|g| g.map(|x| -alpha * x)),
            ClassicalState {
                step,
                ..state.clone()
            },
        )),
        ClassicalKind::RmsProp => {
            let v = state
                .v
                .zip_map(grads, |h, g| RMSPROP_BETA * h + (1.0 - RMSPROP_BETA) * g * g)?;
            let delta = grads.zip_map(&v, |g, h| -alpha * g / (h + CLASSICAL_EPS).sqrt())?;
            Ok((
                delta,
                ClassicalState {
                    m: state.m.clone(),
                    v,
                    step,
                },
            ))
        }
        ClassicalKind::Adam => {
            let m = state
                .m
                .zip_map(grads, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g)?;
            let v = state
                .v
                .zip_map(grads, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g)?;
            let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
            let delta = m.zip_map(&v, |m, v| {
                -alpha * (m / c1) / ((v / c2).sqrt() + CLASSICAL_EPS)
            })?;
            Ok((delta, ClassicalState { m, v, step }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnedKind {
    /// Dual-GRU rule `Δθ = −α·m/√(v + ε)`.
    Optim4Rl,
    /// `Δθ = −α(a·g + b)` with `(a, b)` from one GRU + MLP.
    LinearOptim,
    /// `Δθ = −α·MLP(GRU(·))` emitted directly.
    RnnOptim,
}

impl LearnedKind {
    fn head_width(self) -> usize {
        match self {
            Self::LinearOptim => 2,
            _ => 1,
        }
    }
}

fn mlp_spec(input: usize, output: usize) -> NetSpec {
    NetSpec::Mlp {
        sizes: vec![input, MLP_HIDDEN[0], MLP_HIDDEN[1], output],
        zero_final: true,
    }
}

/// Meta-parameters φ for `kind`. Final MLP layers start at zero, so Optim4RL
/// begins as sign-SGD and the other two rules begin as a null update.
pub fn init_meta(kind: LearnedKind, rng: &mut impl Rng) -> ParamTree {
    let mut phi = ParamTree::new();
    let gru = |rng: &mut _, input| {
        nets::init_with_rng(
            &NetSpec::Gru {
                input,
                hidden: RNN_HIDDEN,
            },
            rng,
        )
    };
    match kind {
        LearnedKind::Optim4Rl => {
            phi.extend_prefixed("rnn1", &gru(rng, 2));
            phi.extend_prefixed("mlp1", &nets::init_with_rng(&mlp_spec(RNN_HIDDEN, 1), rng));
            phi.extend_prefixed("rnn2", &gru(rng, 1));
            phi.extend_prefixed("mlp2", &nets::init_with_rng(&mlp_spec(RNN_HIDDEN, 1), rng));
        }
        LearnedKind::LinearOptim | LearnedKind::RnnOptim => {
            phi.extend_prefixed("rnn", &gru(rng, 2));
            let head = mlp_spec(RNN_HIDDEN, kind.head_width());
            phi.extend_prefixed("mlp", &nets::init_with_rng(&head, rng));
        }
    }
    phi
}

/// Intermediate values of one batched Optim4RL step, all `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct Optim4RlTrace {
    pub clipped: Var,
    pub m_sign: Var,
    pub m: Var,
    pub v: Var,
    pub delta: Var,
    pub state: BankVars,
}

fn check_finite(tape: &Tape, g: Var) -> Result<()> {
    if tape.value(g).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "agent gradient",
        })
    }
}

fn column(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    tape.reshape(x, &[n])
}

/// Optim4RL over a batch of coordinates `g: [C]` with banks `[C, 8]`.
pub fn optim4rl_trace(
    tape: &mut Tape,
    phi: &VarTree,
    grads: Var,
    state: BankVars,
    alpha: f64,
) -> Result<Optim4RlTrace> {
    check_finite(tape, grads)?;
    let clipped = tape.clip(grads, -GRAD_CLIP, GRAD_CLIP);
    let (g_sign, g_log) = process_gradient_tape(tape, clipped)?;
    let g_in = tape.concat(&[g_sign, g_log])?;

    let (h1, x1) = nets::gru_step(tape, &phi.subtree("rnn1"), state.h1, g_in)?;
    let o1 = nets::mlp_apply(tape, &phi.subtree("mlp1"), x1)?;
    let o1 = column(tape, o1)?;
    let biased = tape.add_scalar(o1, SIGN_BIAS);
    let soft = tape.tanh(biased);
    let m_sign = tape.straight_through_sign(soft)?;
    let g_sign = column(tape, g_sign)?;
    let signs = tape.mul(g_sign, m_sign)?;
    let mag = tape.exp(o1);
    let m = tape.mul(signs, mag)?;

    let g_log2 = tape.scale(g_log, 2.0);
    let (h2, x2) = nets::gru_step(tape, &phi.subtree("rnn2"), state.h2, g_log2)?;
    let o2 = nets::mlp_apply(tape, &phi.subtree("mlp2"), x2)?;
    let o2 = column(tape, o2)?;
    let v = tape.exp(o2);

    let denom = tape.add_scalar(v, DENOM_EPS);
    let denom = tape.sqrt(denom);
    let ratio = tape.div(m, denom)?;
    let delta = tape.scale(ratio, -alpha);
    Ok(Optim4RlTrace {
        clipped,
        m_sign,
        m,
        v,
        delta,
        state: BankVars { h1, h2 },
    })
}

fn linear_or_rnn(
    kind: LearnedKind,
    tape: &mut Tape,
    phi: &VarTree,
    grads: Var,
    state: BankVars,
    alpha: f64,
) -> Result<(Var, BankVars)> {
    check_finite(tape, grads)?;
    let (g_sign, g_log) = process_gradient_tape(tape, grads)?;
    let g_in = tape.concat(&[g_sign, g_log])?;
    let (h1, x) = nets::gru_step(tape, &phi.subtree("rnn"), state.h1, g_in)?;
    let out = nets::mlp_apply(tape, &phi.subtree("mlp"), x)?;
    let step = match kind {
        LearnedKind::LinearOptim => {
            let a = tape.slice(out, 0, 1)?;
            let a = column(tape, a)?;
            let b = tape.slice(out, 1, 2)?;
            let b = column(tape, b)?;
            let g = tape.stop_gradient(grads)?;
            let ag = tape.mul(a, g)?;
            tape.add(ag, b)?
        }
        _ => column(tape, out)?,
    };
    let delta = tape.scale(step, -alpha);
    Ok((
        delta,
        BankVars {
            h1,
            h2: state.h2,
        },
    ))
}

/// One batched learned-optimizer step on the tape.
pub fn learned_update(
    kind: LearnedKind,
    tape: &mut Tape,
    phi: &VarTree,
    grads: Var,
    state: BankVars,
    alpha: f64,
) -> Result<(Var, BankVars)> {
    match kind {
        LearnedKind::Optim4Rl => {
            let t = optim4rl_trace(tape, phi, grads, state, alpha)?;
            Ok((t.delta, t.state))
        }
        _ => linear_or_rnn(kind, tape, phi, grads, state, alpha),
    }
}

/// A learned rule with concrete meta-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedOptimizer {
    pub kind: LearnedKind,
    pub meta: ParamTree,
}

impl CoordinateRule for LearnedOptimizer {
    fn update(
        &self,
        tape: &mut Tape,
        grads: Var,
        state: BankVars,
        alpha: f64,
    ) -> Result<(Var, BankVars)> {
        let phi = self.meta.bind_constant(tape);
        learned_update(self.kind, tape, &phi, grads, state, alpha)
    }
}

/// A learned rule whose meta-parameters already live on a tape (as leaves
/// during meta-training).
#[derive(Debug, Clone)]
pub struct BoundLearned {
    pub kind: LearnedKind,
    pub phi: VarTree,
}

impl CoordinateRule for BoundLearned {
    fn update(
        &self,
        tape: &mut Tape,
        grads: Var,
        state: BankVars,
        alpha: f64,
    ) -> Result<(Var, BankVars)> {
        learned_update(self.kind, tape, &self.phi, grads, state, alpha)
    }
}

fn scalar_step(
    kind: LearnedKind,
    meta: &ParamTree,
    (h1, h2): (&[f64], &[f64]),
    g: f64,
    alpha: f64,
) -> Result<(f64, (Vec<f64>, Vec<f64>))> {
    let bank = HiddenStateBank {
        h1: Tensor::new(vec![1, h1.len()], h1.to_vec())?,
        h2: Tensor::new(vec![1, h2.len()], h2.to_vec())?,
    };
    let mut grads = ParamTree::new();
    grads.insert("g", Tensor::vector(vec![g]));
    let rule = LearnedOptimizer {
        kind,
        meta: meta.clone(),
    };
    let (delta, bank) = nets::coordinatewise_apply(&rule, &grads, &bank, alpha)?;
    Ok((
        delta.get("g")?.item(),
        (bank.h1.into_data(), bank.h2.into_data()),
    ))
}

/// Optim4RL on one coordinate: `(Δθ, (h1', h2'))`.
pub fn optim4rl_update(
    meta: &ParamTree,
    h: (&[f64], &[f64]),
    g: f64,
    alpha: f64,
) -> Result<(f64, (Vec<f64>, Vec<f64>))> {
    scalar_step(LearnedKind::Optim4Rl, meta, h, g, alpha)
}

pub fn linear_optim_update(meta: &ParamTree, h: &[f64], g: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    let (d, (h1, _)) = scalar_step(LearnedKind::LinearOptim, meta, (h, h), g, alpha)?;
    Ok((d, h1))
}

pub fn rnn_optim_update(meta: &ParamTree, h: &[f64], g: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    let (d, (h1, _)) = scalar_step(LearnedKind::RnnOptim, meta, (h, h), g, alpha)?;
    Ok((d, h1))
}

/// Every optimizer the agent can be trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Classical(ClassicalKind),
    Learned(LearnedKind),
}

impl OptimizerKind {
    pub const NAMES: [&'static str; 6] = ["sgd", "rmsprop", "adam", "optim4rl", "linear", "l2l"];
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sgd" => Self::Classical(ClassicalKind::Sgd),
            "rmsprop" => Self::Classical(ClassicalKind::RmsProp),
            "adam" => Self::Classical(ClassicalKind::Adam),
            "optim4rl" => Self::Learned(LearnedKind::Optim4Rl),
            "linear" => Self::Learned(LearnedKind::LinearOptim),
            "l2l" => Self::Learned(LearnedKind::RnnOptim),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown optimizer `{other}` (expected one of {:?})",
                    Self::NAMES
                )))
            }
        })
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Classical(ClassicalKind::Sgd) => "sgd",
            Self::Classical(ClassicalKind::RmsProp) => "rmsprop",
            Self::Classical(ClassicalKind::Adam) => "adam",
            Self::Learned(LearnedKind::Optim4Rl) => "optim4rl",
            Self::Learned(LearnedKind::LinearOptim) => "linear",
            Self::Learned(LearnedKind::RnnOptim) => "l2l",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Classical(ClassicalState),
    Learned(HiddenStateBank),
}

/// An optimizer with fixed hyperparameters (and frozen φ for learned rules).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptimizer {
    pub kind: OptimizerKind,
    pub alpha: f64,
    pub meta: Option<ParamTree>,
}

impl AgentOptimizer {
    pub fn classical(kind: ClassicalKind, alpha: f64) -> Self {
        Self {
            kind: OptimizerKind::Classical(kind),
            alpha,
            meta: None,
        }
    }

    pub fn learned(kind: LearnedKind, meta: ParamTree, alpha: f64) -> Self {
        Self {
            kind: OptimizerKind::Learned(kind),
            alpha,
            meta: Some(meta),
        }
    }

    pub fn init_state(&self, params: &ParamTree) -> OptimizerState {
        match self.kind {
            OptimizerKind::Classical(_) => {
                OptimizerState::Classical(ClassicalState::zeros_like(params))
            }
            OptimizerKind::Learned(_) => {
                OptimizerState::Learned(HiddenStateBank::zeros(params.numel(), RNN_HIDDEN))
            }
        }
    }

    /// `Δθ` for `grads`, advancing `state` in place.
    pub fn update(&self, state: &mut OptimizerState, grads: &ParamTree) -> Result<ParamTree> {
        match (self.kind, state) {
            (OptimizerKind::Classical(kind), OptimizerState::Classical(s)) => {
                let (delta, next) = classical_update(kind, s, grads, self.alpha)?;
                *s = next;
                Ok(delta)
            }
            (OptimizerKind::Learned(kind), OptimizerState::Learned(bank)) => {
                let meta = self
                    .meta
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig("learned optimizer without φ".into()))?;
                let rule = LearnedOptimizer { kind, meta };
                let (delta, next) = nets::coordinatewise_apply(&rule, grads, bank, self.alpha)?;
                *bank = next;
                Ok(delta)
            }
            _ => Err(Error::InvalidConfig(
                "optimizer state does not match optimizer kind".into(),
            )),
        }
    }
}
