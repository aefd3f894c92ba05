//! Central finite-difference checks of tape gradients.
//!
//! The function is re-evaluated with every stop-gradient node frozen at the
//! value it had at the base point, so straight-through estimators and
//! stop-gradiented advantages are differenced the same way backward treats
//! them. Coordinates whose difference quotient changes between step `h` and
//! `h/2` straddle a kink (relu, clip) and are replaced by fresh draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{self, EnvRunner, LossWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gridworld;
use crate::nets::{self, NetSpec};
use crate::params::{ParamTree, VarTree};
use crate::tensor::Tensor;

pub const REL_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, 1e-6)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// `(path, index within tensor, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare backward against central differences with step `step` on `n`
/// coordinates drawn uniformly (with replacement across kink retries).
pub fn gradcheck(
    params: &ParamTree,
    f: impl Fn(&mut Tape, &VarTree) -> Result<Var>,
    n: usize,
    step: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let root = f(&mut tape, &vars)?;
    let analytic = vars.grads(&tape.backward(root)?).flatten();
    let stops = tape.stop_values().to_vec();
    let base = params.flatten();
    if base.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layout = params.layout();

    let eval = |flat: &[f64]| -> Result<f64> {
        let mut tape = Tape::with_frozen_stops(stops.clone());
        let vars = params.unflatten(flat)?.bind(&mut tape);
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };
    let quotient = |i: usize, h: f64| -> Result<f64> {
        let mut x = base.clone();
        x[i] = base[i] + h;
        let up = eval(&x)?;
        x[i] = base[i] - h;
        let down = eval(&x)?;
        Ok((up - down) / (2.0 * h))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut attempts = 0;
    while report.checked < n {
        attempts += 1;
        if attempts > 20 * n {
            return Err(Error::InvalidConfig(
                "gradcheck: too many coordinates sit on kinks".into(),
            ));
        }
        let i = rng.gen_range(0..base.len());
        let fd = quotient(i, step)?;
        let fd_half = quotient(i, step / 2.0)?;
        if relative_error(fd, fd_half) > 1e-3 {
            report.skipped_kinks += 1;
            continue;
        }
        let err = relative_error(analytic[i], fd);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            let (path, off, _) = layout
                .iter()
                .find(|(_, off, len)| i >= *off && i < off + len)
                .expect("coordinate in layout");
            report.worst = Some((path.clone(), i - off, analytic[i], fd));
        }
    }
    Ok(report)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `Σ_t Σ y_t ⊙ W_t` with fixed random `W_t`.
fn readout(tape: &mut Tape, ys: &[Var], weights: &[Tensor]) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for (y, w) in ys.iter().zip(weights) {
        let w = tape.constant(w.clone());
        let p = tape.mul(*y, w)?;
        let s = tape.sum(p);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

fn check_mlp(coords: usize, step: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = NetSpec::Mlp {
        sizes: vec![6, 32, 32, 4],
        zero_final: false,
    };
    let params = nets::init_params(&spec, 7);
    let x = random(&[20, 6], &mut rng);
    let w = random(&[20, 4], &mut rng);
    gradcheck(
        &params,
        |tape, v| {
            let x = tape.constant(x.clone());
            let y = nets::mlp_apply(tape, v, x)?;
            let y = tape.tanh(y);
            readout(tape, &[y], std::slice::from_ref(&w))
        },
        coords,
        step,
        11,
    )
}

/// Five steps of a GRU or LSTM over a batch of 7 random sequences.
fn check_recurrent(spec: NetSpec, seed: u64, coords: usize, step: f64) -> Result<GradcheckReport> {
    let (input, hidden, lstm) = match spec {
        NetSpec::Gru { input, hidden } => (input, hidden, false),
        NetSpec::Lstm { input, hidden } => (input, hidden, true),
        _ => return Err(Error::InvalidConfig("recurrent spec expected".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = nets::init_params(&spec, seed);
    let (batch, steps) = (7, 5);
    let xs: Vec<Tensor> = (0..steps).map(|_| random(&[batch, input], &mut rng)).collect();
    let ws: Vec<Tensor> = (0..steps).map(|_| random(&[batch, hidden], &mut rng)).collect();
    let h0 = random(&[batch, hidden], &mut rng);
    let c0 = random(&[batch, hidden], &mut rng);
    gradcheck(
        &params,
        |tape, v| {
            let mut h = tape.constant(h0.clone());
            let mut c = tape.constant(c0.clone());
            let mut ys = Vec::with_capacity(steps);
            for x in &xs {
                let x = tape.constant(x.clone());
                let y = if lstm {
                    let ((h2, c2), y) = nets::lstm_step(tape, v, (h, c), x)?;
                    c = c2;
                    h = h2;
                    y
                } else {
                    let (h2, y) = nets::gru_step(tape, v, h, x)?;
                    h = h2;
                    y
                };
                ys.push(y);
            }
            readout(tape, &ys, &ws)
        },
        coords,
        step,
        seed + 100,
    )
}

fn check_conv(coords: usize, step: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = NetSpec::Conv2d {
        in_channels: 3,
        out_channels: 8,
        kernel: 2,
    };
    let params = nets::init_params(&spec, 3);
    let x = random(&[2, 3, 5, 5], &mut rng);
    let w = random(&[2, 4 * 4 * 8], &mut rng);
    gradcheck(
        &params,
        |tape, v| {
            let x = tape.constant(x.clone());
            let y = nets::conv2d_apply(tape, v, x)?;
            readout(tape, &[y], std::slice::from_ref(&w))
        },
        coords,
        step,
        5,
    )
}

/// Full A2C loss of a fresh agent on one 20-step rollout.
fn check_a2c(env: &str, seed: u64, coords: usize, step: f64) -> Result<GradcheckReport> {
    let config = gridworld::make_env(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = agent::init_agent(&config, &mut rng);
    let mut runner = EnvRunner::new(config.clone(), &mut rng);
    let traj = agent::rollout(&mut runner, &params, 20, &mut rng)?;
    gradcheck(
        &params,
        |tape, v| Ok(agent::a2c_loss(tape, v, &config, &traj, LossWeights::default())?.total),
        coords,
        step,
        seed,
    )
}

/// Random MLP, three GRU and three LSTM shapes, a conv layer, and the A2C
/// loss of a small and a big agent.
pub fn network_suite(coords: usize, step: f64) -> Result<Vec<(String, GradcheckReport)>> {
    let mut out = vec![("mlp".to_string(), check_mlp(coords, step)?)];
    let shapes = [(1, 8), (2, 8), (5, 16)];
    for (i, &(input, hidden)) in shapes.iter().enumerate() {
        let spec = NetSpec::Gru { input, hidden };
        out.push((format!("gru {input}->{hidden}"), check_recurrent(spec, i as u64, coords, step)?));
    }
    for (i, &(input, hidden)) in shapes.iter().enumerate() {
        let spec = NetSpec::Lstm { input, hidden };
        let r = check_recurrent(spec, 10 + i as u64, coords, step)?;
        out.push((format!("lstm {input}->{hidden}"), r));
    }
    out.push(("conv".to_string(), check_conv(coords, step)?));
    out.push(("a2c small".to_string(), check_a2c("small_dense_short", 21, coords, step)?));
    out.push(("a2c big".to_string(), check_a2c("big_sparse_long", 22, coords, step)?));
    Ok(out)
}
