//! The six object-collection gridworlds.
//!
//! Each object is `[reward, p_terminate, p_respawn]`. The observation is a
//! `{0,1}` tensor of shape `[N + 1, H, W]`: one channel per object followed by
//! one channel for the agent's own position.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_ACTIONS: usize = 9;

pub const ENV_NAMES: [&str; 6] = [
    "small_dense_short",
    "small_dense_long",
    "big_sparse_short",
    "big_sparse_long",
    "big_dense_short",
    "big_dense_long",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub reward: f64,
    pub p_terminate: f64,
    pub p_respawn: f64,
}

impl ObjectSpec {
    pub const fn new(reward: f64, p_terminate: f64, p_respawn: f64) -> Self {
        Self {
            reward,
            p_terminate,
            p_respawn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridworldConfig {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectSpec>,
    pub horizon: usize,
}

impl GridworldConfig {
    pub fn new(
        name: impl Into<String>,
        height: usize,
        width: usize,
        objects: Vec<ObjectSpec>,
        horizon: usize,
    ) -> Result<Self> {
        let cfg = Self {
            name: name.into(),
            height,
            width,
            objects,
            horizon,
        };
        if cfg.height * cfg.width <= cfg.objects.len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "{}x{} grid has no room for the agent and {} objects",
                cfg.height,
                cfg.width,
                cfg.objects.len()
            )));
        }
        if cfg.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        for o in &cfg.objects {
            if !(0.0..=1.0).contains(&o.p_terminate) || !(0.0..=1.0).contains(&o.p_respawn) {
                return Err(Error::InvalidConfig(format!("bad object probabilities {o:?}")));
            }
        }
        Ok(cfg)
    }

    pub fn channels(&self) -> usize {
        self.objects.len() + 1
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.channels(), self.height, self.width]
    }

    pub fn obs_dim(&self) -> usize {
        self.channels() * self.height * self.width
    }

    /// Worlds named `small_*` use an MLP feature net, the rest a conv net.
    pub fn is_small(&self) -> bool {
        self.name.starts_with("small")
    }

    fn cells(&self) -> usize {
        self.height * self.width
    }
}

pub fn make_env(name: &str) -> Result<GridworldConfig> {
    let pair = |r: f64, t: f64, p: f64| vec![ObjectSpec::new(r, t, p), ObjectSpec::new(-r, 0.5, p)];
    let quad = |r: f64, p: f64| {
        vec![
            ObjectSpec::new(r, 0.0, p),
            ObjectSpec::new(r, 0.0, p),
            ObjectSpec::new(-r, 0.5, p),
            ObjectSpec::new(-r, 0.5, p),
        ]
    };
    let (h, w, objects, horizon) = match name {
        "small_dense_short" => (4, 6, pair(100.0, 0.0, 0.5), 50),
        "small_dense_long" => (6, 4, pair(1000.0, 0.0, 0.5), 500),
        "big_sparse_short" => (10, 12, quad(100.0, 0.05), 50),
        "big_sparse_long" => (12, 10, quad(10.0, 0.05), 500),
        "big_dense_short" => (9, 13, quad(10.0, 0.5), 50),
        "big_dense_long" => (13, 9, quad(1.0, 0.5), 500),
        other => return Err(Error::UnknownEnv(other.to_string())),
    };
    GridworldConfig::new(name, h, w, objects, horizon)
}

#[derive(Debug, Clone)]
pub struct GridworldState {
    /// `(row, col)`
    pub agent: (usize, usize),
    /// `None` once collected and not yet respawned.
    pub objects: Vec<Option<(usize, usize)>>,
    pub t: usize,
    pub done: bool,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Tensor,
    pub reward: f64,
    /// `terminated || truncated`
    pub done: bool,
    pub terminated: bool,
    /// The horizon was reached without termination.
    pub truncated: bool,
}

pub fn observation(config: &GridworldConfig, state: &GridworldState) -> Tensor {
    let (h, w) = (config.height, config.width);
    let mut obs = Tensor::zeros(&config.obs_shape());
    let data = obs.data_mut();
    for (k, pos) in state.objects.iter().enumerate() {
        if let Some((r, c)) = pos {
            data[(k * h + r) * w + c] = 1.0;
        }
    }
    let (r, c) = state.agent;
    data[(config.objects.len() * h + r) * w + c] = 1.0;
    obs
}

/// Agent and objects on distinct uniformly random cells; `t = 0`.
pub fn reset(config: &GridworldConfig, rng: &mut impl Rng) -> (GridworldState, Tensor) {
    let w = config.width;
    let picks = sample(rng, config.cells(), config.objects.len() + 1);
    let cell = |i: usize| (i / w, i % w);
    let agent = cell(picks.index(0));
    let objects = (1..picks.len()).map(|k| Some(cell(picks.index(k)))).collect();
    let state = GridworldState {
        agent,
        objects,
        t: 0,
        done: false,
        rng: ChaCha8Rng::seed_from_u64(rng.gen()),
    };
    let obs = observation(config, &state);
    (state, obs)
}

/// `(d_row, d_col)` for actions `0..9`; action 4 stays in place.
pub fn action_delta(action: usize) -> (isize, isize) {
    (action as isize / 3 - 1, action as isize % 3 - 1)
}

pub fn step(
    config: &GridworldConfig,
    state: &mut GridworldState,
    action: usize,
) -> Result<StepOutcome> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    if action >= NUM_ACTIONS {
        return Err(Error::InvalidConfig(format!("action {action} out of range")));
    }
    let (dr, dc) = action_delta(action);
    let clamp = |v: usize, d: isize, n: usize| (v as isize + d).clamp(0, n as isize - 1) as usize;
    state.agent = (
        clamp(state.agent.0, dr, config.height),
        clamp(state.agent.1, dc, config.width),
    );

    let mut reward = 0.0;
    let mut terminated = false;
    if let Some(k) = state.objects.iter().position(|o| *o == Some(state.agent)) {
        let spec = config.objects[k];
        reward = spec.reward;
        state.objects[k] = None;
        terminated = state.rng.gen::<f64>() < spec.p_terminate;
    }

    for k in 0..state.objects.len() {
        if state.objects[k].is_none() && state.rng.gen::<f64>() < config.objects[k].p_respawn {
            let free: Vec<(usize, usize)> = (0..config.cells())
                .map(|i| (i / config.width, i % config.width))
                .filter(|&p| p != state.agent && !state.objects.contains(&Some(p)))
                .collect();
            let pick = state.rng.gen_range(0..free.len());
            state.objects[k] = Some(free[pick]);
        }
    }

    state.t += 1;
    let truncated = !terminated && state.t >= config.horizon;
    state.done = terminated || truncated;
    Ok(StepOutcome {
        observation: observation(config, state),
        reward,
        done: state.done,
        terminated,
        truncated,
    })
}
