//! Advantage actor-critic: rollouts, λ-return targets and the two losses used
//! by meta-training (full A2C loss inside, actor loss outside).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gridworld::{self, GridworldConfig, GridworldState, NUM_ACTIONS};
use crate::nets::{self, NetSpec};
use crate::params::{value_and_grad, ParamTree, VarTree};
use crate::tensor::Tensor;

pub const FEATURE_WIDTH: usize = 32;
pub const CONV_FEATURES: usize = 16;
pub const CONV_KERNEL: usize = 2;
pub const ROLLOUT_STEPS: usize = 20;
pub const GAMMA: f64 = 0.995;
pub const LAMBDA: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub critic: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            critic: 0.5,
            entropy: 0.01,
        }
    }
}

/// Fresh agent parameters for `config`: an MLP feature net for small worlds, a
/// conv feature net for big ones, then affine actor and critic heads.
pub fn init_agent(config: &GridworldConfig, rng: &mut impl Rng) -> ParamTree {
    let mut p = ParamTree::new();
    let [c, h, w] = config.obs_shape();
    let feature_in = if config.is_small() {
        config.obs_dim()
    } else {
        let conv = nets::init_with_rng(
            &NetSpec::Conv2d {
                in_channels: c,
                out_channels: CONV_FEATURES,
                kernel: CONV_KERNEL,
            },
            rng,
        );
        p.extend_prefixed("conv", &conv);
        (h - CONV_KERNEL + 1) * (w - CONV_KERNEL + 1) * CONV_FEATURES
    };
    let dense = |rng: &mut _, i, o| {
        nets::init_with_rng(
            &NetSpec::Mlp {
                sizes: vec![i, o],
                zero_final: false,
            },
            rng,
        )
    };
    p.extend_prefixed("feature", &dense(rng, feature_in, FEATURE_WIDTH));
    p.extend_prefixed("actor", &dense(rng, FEATURE_WIDTH, NUM_ACTIONS));
    p.extend_prefixed("critic", &dense(rng, FEATURE_WIDTH, 1));
    p
}

/// Logits `[B, 9]` and values `[B]` for observations `[B, obs_dim]`.
pub fn agent_forward(
    tape: &mut Tape,
    params: &VarTree,
    config: &GridworldConfig,
    obs: Var,
) -> Result<(Var, Var)> {
    let batch = tape.value(obs).rows();
    let mut x = obs;
    if !config.is_small() {
        let [c, h, w] = config.obs_shape();
        x = tape.reshape(x, &[batch, c, h, w])?;
        x = nets::conv2d_apply(tape, &params.subtree("conv"), x)?;
    }
    let feature = nets::mlp_apply(tape, &params.subtree("feature"), x)?;
    let feature = tape.relu(feature);
    let logits = nets::mlp_apply(tape, &params.subtree("actor"), feature)?;
    let value = nets::mlp_apply(tape, &params.subtree("critic"), feature)?;
    let value = tape.reshape(value, &[batch])?;
    Ok((logits, value))
}

/// Logits and value for a single observation, without gradients.
pub fn policy_value(
    params: &ParamTree,
    config: &GridworldConfig,
    obs: &Tensor,
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let x = tape.constant(obs.clone().reshape(&[1, config.obs_dim()])?);
    let (logits, value) = agent_forward(&mut tape, &vars, config, x)?;
    Ok((tape.value(logits).data().to_vec(), tape.value(value).item()))
}

/// Draw an index from `softmax(logits)`; returns it with its log-probability.
pub fn sample_action(logits: &[f64], rng: &mut impl Rng) -> (usize, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut choice = logits.len() - 1;
    for (a, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            choice = a;
            break;
        }
    }
    (choice, (weights[choice] / total).ln())
}

/// An environment plus the bookkeeping a rollout needs across calls.
#[derive(Debug, Clone)]
pub struct EnvRunner {
    pub config: GridworldConfig,
    pub state: GridworldState,
    pub obs: Tensor,
    pub episode_return: f64,
}

impl EnvRunner {
    pub fn new(config: GridworldConfig, rng: &mut impl Rng) -> Self {
        let (state, obs) = gridworld::reset(&config, rng);
        Self {
            config,
            state,
            obs,
            episode_return: 0.0,
        }
    }

    pub fn reset(&mut self, rng: &mut impl Rng) {
        let (state, obs) = gridworld::reset(&self.config, rng);
        self.state = state;
        self.obs = obs;
        self.episode_return = 0.0;
    }
}

/// A fixed-length rollout. Values were recorded under the parameters that
/// generated the actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `[T, obs_dim]`
    pub observations: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Episode ended at this step (termination or truncation).
    pub dones: Vec<bool>,
    pub truncated: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// `v` of the final state of a truncated episode; 0 elsewhere.
    pub truncation_values: Vec<f64>,
    /// `v(S_T)` for the state after the last step.
    pub bootstrap_value: f64,
    /// Undiscounted returns of episodes that finished during this rollout.
    pub episode_returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Run `steps` environment steps under `params`, resetting the episode
/// whenever it ends so the trajectory always has exactly `steps` entries.
pub fn rollout(
    runner: &mut EnvRunner,
    params: &ParamTree,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let cfg = runner.config.clone();
    let mut obs_rows = Vec::with_capacity(steps * cfg.obs_dim());
    let mut traj = Trajectory {
        observations: Tensor::zeros(&[0]),
        actions: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        dones: Vec::with_capacity(steps),
        truncated: Vec::with_capacity(steps),
        log_probs: Vec::with_capacity(steps),
        values: Vec::with_capacity(steps),
        truncation_values: Vec::with_capacity(steps),
        bootstrap_value: 0.0,
        episode_returns: Vec::new(),
    };
    for _ in 0..steps {
        let (logits, value) = policy_value(params, &cfg, &runner.obs)?;
        let (action, logp) = sample_action(&logits, rng);
        obs_rows.extend_from_slice(runner.obs.data());
        let out = gridworld::step(&cfg, &mut runner.state, action)?;
        runner.episode_return += out.reward;
        let trunc_v = if out.truncated {
            policy_value(params, &cfg, &out.observation)?.1
        } else {
            0.0
        };
        traj.actions.push(action);
        traj.rewards.push(out.reward);
        traj.dones.push(out.done);
        traj.truncated.push(out.truncated);
        traj.log_probs.push(logp);
        traj.values.push(value);
        traj.truncation_values.push(trunc_v);
        if out.done {
            traj.episode_returns.push(runner.episode_return);
            runner.reset(rng);
        } else {
            runner.obs = out.observation;
        }
    }
    traj.bootstrap_value = policy_value(params, &cfg, &runner.obs)?.1;
    traj.observations = Tensor::new(vec![steps, cfg.obs_dim()], obs_rows)?;
    Ok(traj)
}

/// Backward λ-return recursion
/// `G_t = R_{t+1} + γ[(1−λ)v(S_{t+1}) + λG_{t+1}]`, with no continuation after a
/// termination and a plain `v(S_{t+1})` bootstrap after a truncation.
pub fn lambda_returns(traj: &Trajectory, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = traj.len();
    let mut out = vec![0.0; n];
    let mut next_return = traj.bootstrap_value;
    let mut next_value = traj.bootstrap_value;
    for t in (0..n).rev() {
        let r = traj.rewards[t];
        out[t] = if traj.truncated[t] {
            r + gamma * traj.truncation_values[t]
        } else if traj.dones[t] {
            r
        } else {
            r + gamma * ((1.0 - lambda) * next_value + lambda * next_return)
        };
        next_return = out[t];
        next_value = traj.values[t];
    }
    out
}

/// Tape handles for the pieces of the A2C loss.
#[derive(Debug, Clone, Copy)]
pub struct A2cLoss {
    pub total: Var,
    pub actor: Var,
    pub critic: Var,
    pub entropy: Var,
}

/// `actor + w_c·critic − w_e·entropy`, all averaged over the trajectory.
/// The advantage in the actor term is stop-gradiented.
pub fn a2c_loss(
    tape: &mut Tape,
    params: &VarTree,
    config: &GridworldConfig,
    traj: &Trajectory,
    weights: LossWeights,
) -> Result<A2cLoss> {
    let n = traj.len();
    let obs = tape.constant(traj.observations.clone());
    let (logits, values) = agent_forward(tape, params, config, obs)?;
    let logp_all = tape.log_softmax(logits);
    let idx = traj
        .actions
        .iter()
        .enumerate()
        .map(|(t, &a)| t * NUM_ACTIONS + a)
        .collect();
    let logp = tape.gather(logp_all, idx, &[n])?;
    let targets = tape.constant(Tensor::vector(lambda_returns(traj, GAMMA, LAMBDA)));

    let td = tape.sub(targets, values)?;
    let adv = tape.stop_gradient(td)?;
    let weighted = tape.mul(adv, logp)?;
    let actor = tape.mean(weighted);
    let actor = tape.neg(actor);

    let sq = tape.mul(td, td)?;
    let critic = tape.mean(sq);

    let probs = tape.exp(logp_all);
    let plogp = tape.mul(probs, logp_all)?;
    let s = tape.sum(plogp);
    let entropy = tape.scale(s, -1.0 / n as f64);

    let wc = tape.scale(critic, weights.critic);
    let we = tape.scale(entropy, weights.entropy);
    let total = tape.add(actor, wc)?;
    let total = tape.sub(total, we)?;
    Ok(A2cLoss {
        total,
        actor,
        critic,
        entropy,
    })
}

/// The outer objective: the actor term of [`a2c_loss`] alone.
pub fn actor_loss(
    tape: &mut Tape,
    params: &VarTree,
    config: &GridworldConfig,
    traj: &Trajectory,
) -> Result<Var> {
    Ok(a2c_loss(tape, params, config, traj, LossWeights::default())?.actor)
}

/// Inner loss value and its gradient with respect to the agent parameters.
pub fn a2c_grad(
    params: &ParamTree,
    config: &GridworldConfig,
    traj: &Trajectory,
    weights: LossWeights,
) -> Result<(f64, ParamTree)> {
    let (loss, grads) = value_and_grad(params, |tape, vars| {
        Ok(a2c_loss(tape, vars, config, traj, weights)?.total)
    })?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "inner loss" });
    }
    Ok((loss, grads))
}

/// Mean undiscounted episode return of the uniform random policy.
pub fn random_policy_return(config: &GridworldConfig, episodes: usize, rng: &mut impl Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..episodes {
        let (mut state, _) = gridworld::reset(config, rng);
        loop {
            let out = gridworld::step(config, &mut state, rng.gen_range(0..NUM_ACTIONS))
                .expect("live episode");
            total += out.reward;
            if out.done {
                break;
            }
        }
    }
    total / episodes as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain(rewards: Vec<f64>, values: Vec<f64>, bootstrap: f64) -> Trajectory {
        let n = rewards.len();
        Trajectory {
            observations: Tensor::zeros(&[n, 1]),
            actions: vec![0; n],
            rewards,
            dones: vec![false; n],
            truncated: vec![false; n],
            log_probs: vec![0.0; n],
            values,
            truncation_values: vec![0.0; n],
            bootstrap_value: bootstrap,
            episode_returns: vec![],
        }
    }

    #[test]
    fn two_step_hand_recursion() {
        let t = plain(vec![1.0, 1.0], vec![0.0, 0.0], 0.0);
        let g = lambda_returns(&t, 0.995, 0.95);
        assert_eq!(g[1], 1.0);
        assert!((g[0] - 1.94525).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_td_target() {
        let t = plain(vec![0.5, -1.0, 2.0], vec![0.3, 0.7, -0.2], 1.5);
        let g = lambda_returns(&t, 0.9, 0.0);
        assert!((g[0] - (0.5 + 0.9 * 0.7)).abs() < 1e-12);
        assert!((g[1] - (-1.0 + 0.9 * -0.2)).abs() < 1e-12);
        assert!((g[2] - (2.0 + 0.9 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_is_discounted_return_with_tail() {
        let t = plain(vec![0.5, -1.0, 2.0], vec![9.0, 9.0, 9.0], 1.5);
        let g = lambda_returns(&t, 0.9, 1.0);
        let want = 0.5 + 0.9 * (-1.0 + 0.9 * (2.0 + 0.9 * 1.5));
        assert!((g[0] - want).abs() < 1e-12);
    }

    #[test]
    fn termination_and_truncation_boundaries() {
        let mut t = plain(vec![1.0, 2.0, 3.0, 4.0], vec![0.1, 0.2, 0.3, 0.4], 5.0);
        t.dones[1] = true;
        t.dones[2] = true;
        t.truncated[2] = true;
        t.truncation_values[2] = 7.0;
        let g = lambda_returns(&t, 0.5, 0.5);
        assert_eq!(g[3], 4.0 + 0.5 * 5.0);
        assert_eq!(g[2], 3.0 + 0.5 * 7.0);
        assert_eq!(g[1], 2.0);
        assert_eq!(g[0], 1.0 + 0.5 * (0.5 * 0.2 + 0.5 * 2.0));
    }

    proptest! {
        #[test]
        fn lambda_returns_monotone_in_rewards(
            rewards in proptest::collection::vec(-5.0f64..5.0, 6),
            values in proptest::collection::vec(-5.0f64..5.0, 6),
            dones in proptest::collection::vec(any::<bool>(), 6),
            which in 0usize..6,
            bump in 0.0f64..3.0,
        ) {
            let mut t = plain(rewards, values, 0.7);
            t.dones = dones;
            let base = lambda_returns(&t, GAMMA, LAMBDA);
            t.rewards[which] += bump;
            let up = lambda_returns(&t, GAMMA, LAMBDA);
            for k in 0..=which {
                prop_assert!(up[k] >= base[k] - 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; NUM_ACTIONS];
        let n = 10_000;
        for _ in 0..n {
            let (a, lp) = sample_action(&[0.0; NUM_ACTIONS], &mut rng);
            assert!((lp - (1.0f64 / 9.0).ln()).abs() < 1e-12);
            counts[a] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 9.0).abs() < 0.01, "{counts:?}");
        }
    }

    fn setup(name: &str, seed: u64) -> (EnvRunner, ParamTree, ChaCha8Rng) {
        let cfg = gridworld::make_env(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_agent(&cfg, &mut rng);
        (EnvRunner::new(cfg, &mut rng), params, rng)
    }

    #[test]
    fn rollout_has_fixed_length_and_is_deterministic() {
        let run = || {
            let (mut runner, params, mut rng) = setup("small_dense_short", 3);
            (0..4)
                .map(|_| rollout(&mut runner, &params, ROLLOUT_STEPS, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        assert!(a.iter().all(|t| t.len() == ROLLOUT_STEPS));
        assert_eq!(a, run());
    }

    #[test]
    fn rollout_auto_resets_through_episode_ends() {
        let (mut runner, params, mut rng) = setup("small_dense_short", 5);
        let t = rollout(&mut runner, &params, 130, &mut rng).unwrap();
        assert_eq!(t.len(), 130);
        assert!(t.truncated.iter().filter(|&&x| x).count() + t.episode_returns.len() >= 2);
    }

    #[test]
    fn big_world_forward_shapes() {
        let (mut runner, params, mut rng) = setup("big_dense_long", 1);
        let t = rollout(&mut runner, &params, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let v = params.bind(&mut tape);
        let obs = tape.constant(t.observations.clone());
        let (logits, values) = agent_forward(&mut tape, &v, &runner.config, obs).unwrap();
        assert_eq!(tape.value(logits).shape(), &[5, 9]);
        assert_eq!(tape.value(values).shape(), &[5]);
    }

    fn loss_parts(params: &ParamTree, cfg: &GridworldConfig, t: &Trajectory) -> (f64, f64, f64, f64) {
        let mut tape = Tape::new();
        let v = params.bind(&mut tape);
        let l = a2c_loss(&mut tape, &v, cfg, t, LossWeights::default()).unwrap();
        let f = |x| tape.value(x).item();
        (f(l.total), f(l.actor), f(l.critic), f(l.entropy))
    }

    #[test]
    fn zero_advantage_gives_zero_actor_and_critic() {
        let (mut runner, params, mut rng) = setup("small_dense_short", 2);
        let mut t = rollout(&mut runner, &params, 8, &mut rng).unwrap();
        // Make targets equal recorded values: zero rewards, λ=.95 mixing of
        // self-consistent values requires v_t = γ v_{t+1}.
        t.rewards = vec![0.0; 8];
        t.dones = vec![false; 8];
        t.truncated = vec![false; 8];
        let mut tape = Tape::new();
        let v = params.bind(&mut tape);
        let obs = tape.constant(t.observations.clone());
        let (_, vals) = agent_forward(&mut tape, &v, &runner.config, obs).unwrap();
        let vals = tape.value(vals).data().to_vec();
        t.values = vals.clone();
        // choose bootstrap and rewards so that G_t == v_t exactly
        t.bootstrap_value = 0.0;
        for k in 0..8 {
            let nv = if k + 1 < 8 { vals[k + 1] } else { 0.0 };
            t.rewards[k] = vals[k] - GAMMA * nv;
        }
        let g = lambda_returns(&t, GAMMA, LAMBDA);
        for k in 0..8 {
            assert!((g[k] - vals[k]).abs() < 1e-12);
        }
        let (_, actor, critic, _) = loss_parts(&params, &runner.config, &t);
        assert!(actor.abs() < 1e-12);
        assert!(critic.abs() < 1e-20);
    }

    #[test]
    fn one_hot_policy_has_zero_entropy() {
        let (mut runner, mut params, mut rng) = setup("small_dense_short", 2);
        let t = rollout(&mut runner, &params, 6, &mut rng).unwrap();
        params.insert("actor/l0/w", Tensor::zeros(&[FEATURE_WIDTH, NUM_ACTIONS]));
        let mut b = vec![0.0; NUM_ACTIONS];
        b[3] = 2000.0;
        params.insert("actor/l0/b", Tensor::vector(b));
        let (_, _, _, entropy) = loss_parts(&params, &runner.config, &t);
        assert_eq!(entropy, 0.0);
    }

    #[test]
    fn actor_loss_is_the_actor_term() {
        let (mut runner, params, mut rng) = setup("small_dense_short", 8);
        let t = rollout(&mut runner, &params, ROLLOUT_STEPS, &mut rng).unwrap();
        let (total, actor, critic, entropy) = loss_parts(&params, &runner.config, &t);
        let mut tape = Tape::new();
        let v = params.bind(&mut tape);
        let a = actor_loss(&mut tape, &v, &runner.config, &t).unwrap();
        assert_eq!(tape.value(a).item(), actor);
        assert!((total - 0.5 * critic + 0.01 * entropy - actor).abs() < 1e-12);
    }

    #[test]
    fn unused_heads_get_zero_gradient() {
        let (mut runner, params, mut rng) = setup("small_dense_short", 4);
        let t = rollout(&mut runner, &params, ROLLOUT_STEPS, &mut rng).unwrap();
        let w = LossWeights {
            critic: 0.0,
            entropy: 0.01,
        };
        let (_, g) = a2c_grad(&params, &runner.config, &t, w).unwrap();
        assert!(g.get("critic/l0/w").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(g.get("critic/l0/b").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(g.get("actor/l0/w").unwrap().l2_norm() > 0.0);
    }

    #[test]
    fn heavy_entropy_bonus_drives_policy_to_uniform() {
        let (mut runner, params, mut rng) = setup("big_dense_long", 6);
        let t = rollout(&mut runner, &params, ROLLOUT_STEPS, &mut rng).unwrap();
        let w = LossWeights {
            critic: 0.5,
            entropy: 10.0,
        };
        let mut p = params.clone();
        for _ in 0..300 {
            let (_, g) = a2c_grad(&p, &runner.config, &t, w).unwrap();
            p = p.zip_map(&g, |x, d| x - 0.05 * d).unwrap();
        }
        let mut tape = Tape::new();
        let v = p.bind_constant(&mut tape);
        let obs = tape.constant(t.observations.clone());
        let (logits, _) = agent_forward(&mut tape, &v, &runner.config, obs).unwrap();
        let lp = tape.log_softmax(logits);
        let uniform = (1.0f64 / 9.0).ln();
        // KL(uniform || π) averaged over states
        let kl: f64 = tape
            .value(lp)
            .data()
            .iter()
            .map(|l| (uniform - l) / 9.0)
            .sum::<f64>()
            / ROLLOUT_STEPS as f64;
        assert!(kl < 0.01, "kl = {kl}");
    }
}
