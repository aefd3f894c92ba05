//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Not part of the default `cargo test` run (it needs hours on one core):
//!
//! ```text
//! cargo test --release -p optim4rl-cli --test acceptance
//! ACCEPTANCE=1,2,4,5,6,10 cargo test --release -p optim4rl-cli --test acceptance
//! ```
//!
//! Exit status is nonzero when any selected criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use optim4rl::agent;
use optim4rl::autodiff::Tape;
use optim4rl::experiments::{
    self, GradientDataset, IdentityConfig, IdentityMode, TrainSpec,
};
use optim4rl::gradcheck::{gradcheck, network_suite};
use optim4rl::gridworld;
use optim4rl::meta::{self, MetaState, MetaTrainConfig, MetaTrainer};
use optim4rl::nets::HiddenStateBank;
use optim4rl::optimizers::{self, AgentOptimizer, ClassicalKind, LearnedKind};
use optim4rl::params::ParamTree;
use optim4rl::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ENV: &str = "small_dense_short";
/// 10⁵ environment steps at 20 steps per inner update.
const TRAIN_ITERS: u64 = 5000;
const TAIL: f64 = 0.1;
const SWEEP_SEEDS: std::ops::Range<u64> = 0..5;
const EVAL_SEEDS: std::ops::Range<u64> = 1000..1005;
const AGENT_LRS: [f64; 6] = [3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4];

/// Criterion 8 evaluates on seeds untouched while the meta-training recipe
/// below was chosen.
const META_EVAL_SEEDS: std::ops::Range<u64> = 2000..2005;
const META_UNITS: usize = 8;
const META_RESET: usize = 512;
const META_LR: f64 = 3e-4;
const META_ITERS: u64 = 2000;

struct Verdict {
    pass: Option<bool>,
    detail: String,
}

impl Verdict {
    fn check(pass: bool, detail: String) -> Self {
        Self {
            pass: Some(pass),
            detail,
        }
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Mean return over the last 10% of training, one value per seed.
fn tail_returns(opt: &AgentOptimizer, seeds: std::ops::Range<u64>) -> Vec<f64> {
    seeds
        .map(|seed| {
            let spec = TrainSpec {
                env: ENV.into(),
                optimizer: opt.clone(),
                seed,
                iterations: TRAIN_ITERS,
                eval_every: TRAIN_ITERS,
            };
            let out = experiments::run_training(&spec).expect("training run");
            out.tail_return(TRAIN_ITERS, TAIL).unwrap_or(f64::NAN)
        })
        .collect()
}

fn c1_gradcheck() -> Verdict {
    let suite = network_suite(100, 1e-4).expect("gradcheck suite");
    let worst = suite
        .iter()
        .map(|(_, r)| r.max_rel_err)
        .fold(0.0, f64::max);
    let enough = suite.iter().all(|(_, r)| r.checked >= 100);
    let parts: Vec<String> = suite
        .iter()
        .map(|(n, r)| format!("{n} {:.1e}", r.max_rel_err))
        .collect();
    Verdict::check(
        enough && worst < 1e-4,
        format!("max rel err {worst:.2e} < 1e-4 over 100 coords each [{}]", parts.join(", ")),
    )
}

fn c2_meta_gradient() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for kind in [LearnedKind::Optim4Rl, LearnedKind::LinearOptim, LearnedKind::RnnOptim] {
        let cfg = MetaTrainConfig {
            units: 1,
            reset_interval: 4,
            inner_steps: 2,
            kind,
            envs: vec![ENV.into()],
            ..MetaTrainConfig::default()
        };
        let mut trainer = MetaTrainer::new(cfg).expect("trainer");
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base = optimizers::init_meta(kind, &mut rng);
        let flat: Vec<f64> = base.flatten().iter().map(|x| x + rng.gen_range(-0.1..0.1)).collect();
        let phi = base.unflatten(&flat).expect("same layout");
        let unit = &mut trainer.units[0];
        let record = unit.meta_window(kind, &phi, 2, true).expect("window").record.expect("record");
        let config = unit.runner.config.clone();
        let alpha = unit.alpha;
        let r = gradcheck(
            &phi,
            |tape, v| meta::window_outer_loss(tape, kind, v, &config, &record, alpha),
            5,
            1e-5,
            23,
        )
        .expect("meta gradcheck");
        worst = worst.max(r.max_rel_err);
        parts.push(format!("{kind:?} {:.1e}", r.max_rel_err));
    }
    Verdict::check(
        worst < 1e-3,
        format!("M=2, 5 coords, max rel err {worst:.2e} < 1e-3 [{}]", parts.join(", ")),
    )
}

fn c3_identity() -> Verdict {
    let spec = TrainSpec {
        env: "big_dense_long".into(),
        optimizer: AgentOptimizer::classical(ClassicalKind::RmsProp, 3e-3),
        seed: 0,
        iterations: 10_000,
        eval_every: 1000,
    };
    let mut ds = GradientDataset::new().nonzero_only();
    experiments::collect_gradients(&spec, &mut [&mut ds]).expect("collection");
    let cfg = IdentityConfig {
        epochs: 1000,
        max_samples: 100_000,
        ..IdentityConfig::default()
    };
    let mut acc = Vec::new();
    for mode in [IdentityMode::Raw, IdentityMode::Processed, IdentityMode::Random] {
        let r = experiments::identity_experiment(&ds, mode, &cfg).expect("identity");
        eprintln!("  identity {mode:?}: lr {} finals {:?}", r.lr, r.finals);
        acc.push(r.final_accuracy());
    }
    let (raw, processed, random) = (acc[0], acc[1], acc[2]);
    Verdict::check(
        processed >= raw + 0.10 && random >= 0.99,
        format!(
            "200k env steps, {} nonzero grads; accuracy raw {raw:.3}, processed {processed:.3} (need >= raw + 0.10), random {random:.3} (need >= 0.99)",
            ds.len()
        ),
    )
}

fn c4_zero_init_is_sign_sgd() -> Verdict {
    let phi = MetaState::new(LearnedKind::Optim4Rl, 0).phi;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = vec![0.0; optimizers::RNN_HIDDEN];
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let g = rng.gen_range(-1.0..1.0) * 10f64.powf(rng.gen_range(-12.0..2.0));
        let alpha = 10f64.powf(rng.gen_range(-6.0..0.0));
        let (d, _) = optimizers::optim4rl_update(&phi, (&h, &h), g, alpha).expect("update");
        let want = -alpha * g.signum();
        worst = worst.max((d - want).abs() / want.abs());
    }
    Verdict::check(worst < 1e-9, format!("10^4 draws, max rel err {worst:.2e} < 1e-9"))
}

fn c5_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (draws, batch, steps) = (50, 1000, 2);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for _ in 0..draws {
        let base = optimizers::init_meta(LearnedKind::Optim4Rl, &mut rng);
        let scale = rng.gen_range(0.1..2.0);
        let flat: Vec<f64> = base
            .flatten()
            .iter()
            .map(|x| x + scale * rng.gen_range(-1.0..1.0))
            .collect();
        let phi: ParamTree = base.unflatten(&flat).expect("same layout");
        let mut tape = Tape::new();
        let vars = phi.bind(&mut tape);
        let mut state = HiddenStateBank::zeros(batch, optimizers::RNN_HIDDEN).bind_constant(&mut tape);
        for _ in 0..steps {
            let g: Vec<f64> = (0..batch)
                .map(|_| match rng.gen_range(0..10) {
                    0 => 0.0,
                    1 => rng.gen_range(-1e6..1e6),
                    _ => rng.gen_range(-1.0..1.0) * 10f64.powf(rng.gen_range(-20.0..1.0)),
                })
                .collect();
            let g = tape.constant(Tensor::vector(g));
            let t = optimizers::optim4rl_trace(&mut tape, &vars, g, state, 1e-3).expect("trace");
            let (clipped, m_sign, v, delta) = (
                tape.value(t.clipped).data(),
                tape.value(t.m_sign).data(),
                tape.value(t.v).data(),
                tape.value(t.delta).data(),
            );
            for i in 0..batch {
                let ok = v[i] > 0.0
                    && (m_sign[i] == 1.0 || m_sign[i] == -1.0)
                    && clipped[i].abs() <= 1.0
                    && delta[i].is_finite();
                violations += !ok as usize;
                checked += 1;
            }
            state = t.state;
        }
    }
    Verdict::check(
        violations == 0,
        format!("{checked} (phi, g) pairs over {draws} random phi, {violations} violations"),
    )
}

fn c6_ages() -> Verdict {
    let mut bad = Vec::new();
    for (n, m) in [(3usize, 3usize), (4, 8), (6, 512)] {
        let offsets = meta::pipeline_offsets(n, m).expect("offsets");
        let periods = 3 * m as u64;
        let ages = meta::simulate_ages(&offsets, m, periods);
        for t in (m as u64 - 1)..periods {
            let mut got = ages[t as usize].clone();
            let mut want: Vec<u64> = offsets
                .iter()
                .map(|&r| (t + m as u64 - r as u64) % m as u64)
                .collect();
            got.sort_unstable();
            want.sort_unstable();
            let distinct = got.windows(2).all(|w| w[0] < w[1]);
            if got != want || !distinct {
                bad.push(format!("(n={n}, m={m}, t={t})"));
            }
        }
    }
    Verdict::check(
        bad.is_empty(),
        format!("(3,3), (4,8), (6,512) over 3 periods; ages distinct and equal to (t - r_i) mod m; mismatches: {}", bad.len()),
    )
}

struct Classical {
    /// Monte-Carlo mean and standard error of the random-policy return.
    baseline: (f64, f64),
    /// `(name, chosen lr, fresh-seed tail returns)`
    results: Vec<(&'static str, f64, Vec<f64>)>,
}

fn classical() -> Classical {
    let config = gridworld::make_env(ENV).expect("env");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batches: Vec<f64> = (0..100)
        .map(|_| agent::random_policy_return(&config, 1000, &mut rng))
        .collect();
    let baseline = mean_se(&batches);
    let mut results = Vec::new();
    for (name, kind) in [("adam", ClassicalKind::Adam), ("rmsprop", ClassicalKind::RmsProp)] {
        let mut best = (f64::NEG_INFINITY, AGENT_LRS[0]);
        for lr in AGENT_LRS {
            let opt = AgentOptimizer::classical(kind, lr);
            let (m, _) = mean_se(&tail_returns(&opt, SWEEP_SEEDS));
            eprintln!("  {name} lr {lr:e}: sweep mean {m:.2}");
            if m > best.0 {
                best = (m, lr);
            }
        }
        let opt = AgentOptimizer::classical(kind, best.1);
        results.push((name, best.1, tail_returns(&opt, EVAL_SEEDS)));
    }
    Classical { baseline, results }
}

fn c7_classical(c: &Classical) -> Verdict {
    // The symmetric ±100 rewards put the baseline near zero, so the target is
    // five times its upper magnitude bound rather than the point estimate.
    let (b, se) = c.baseline;
    let target = 5.0 * (b.abs() + 2.0 * se);
    let mut pass = true;
    let mut parts = vec![format!(
        "random-policy baseline {b:.3} ± {se:.3} (10^5 episodes), target 5 x (|b| + 2 se) = {target:.3}"
    )];
    for (name, lr, rets) in &c.results {
        let (m, se) = mean_se(rets);
        pass &= m >= target;
        parts.push(format!("{name} lr {lr:e}: {m:.2} ± {se:.2}"));
    }
    Verdict::check(pass, parts.join("; "))
}

fn c8_meta_training(c: &Classical) -> Vec<Verdict> {
    let cfg = MetaTrainConfig {
        units: META_UNITS,
        reset_interval: META_RESET,
        inner_steps: 4,
        meta_lr: META_LR,
        iterations: META_ITERS,
        seed: 0,
        envs: vec![ENV.into()],
        kind: LearnedKind::Optim4Rl,
        agent_lr: None,
    };
    let alpha = meta::default_agent_lr(&gridworld::make_env(ENV).expect("env"));
    let mut trainer = MetaTrainer::new(cfg).expect("trainer");
    let start = Instant::now();
    trainer
        .run(|s| {
            if (s.iteration + 1) % 500 == 0 {
                eprintln!(
                    "  meta iteration {} meta-grad norm {:.2e} ({:.0}s)",
                    s.iteration + 1,
                    s.meta_grad_norm,
                    start.elapsed().as_secs_f64()
                );
            }
            Ok(())
        })
        .expect("meta-training");
    let learned = tail_returns(&trainer.frozen_optimizer(alpha), META_EVAL_SEEDS);
    let zero_phi = MetaState::new(LearnedKind::Optim4Rl, 0).phi;
    let sign = tail_returns(
        &AgentOptimizer::learned(LearnedKind::Optim4Rl, zero_phi, alpha),
        META_EVAL_SEEDS,
    );
    let (lm, lse) = mean_se(&learned);
    let (sm, sse) = mean_se(&sign);
    let (_, adam_lr, adam) = &c.results[0];
    let (am, _) = mean_se(adam);
    let gate = Verdict::check(
        lm - lse > sm + sse,
        format!(
            "frozen Optim4RL {lm:.2} ± {lse:.2} vs zero-init sign-SGD {sm:.2} ± {sse:.2} (5 fresh seeds, n={META_UNITS}, m={META_RESET}, meta lr {META_LR:e}, {META_ITERS} meta steps)"
        ),
    );
    let parity = Verdict::check(
        lm >= 0.7 * am,
        format!("frozen Optim4RL {lm:.2} vs tuned Adam (lr {adam_lr:e}) {am:.2}; within 30% needs >= {:.2}", 0.7 * am),
    );
    vec![gate, parity]
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_optim4rl"))
}

fn run(args: &[&str]) {
    let out = bin().args(args).output().expect("spawn binary");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every subcommand once, outputs under `dir`.
fn cli_pipeline(dir: &Path) -> Vec<std::path::PathBuf> {
    let d = |sub: &str| dir.join(sub).to_str().expect("utf-8 path").to_string();
    let grads = dir.join("collect/grads.csv");
    let ckpt = dir.join("meta/checkpoint.bin");
    run(&[
        "train", "--env", ENV, "--optimizer", "adam", "--seed", "3", "--iterations", "200",
        "--eval-every", "20", "--out-dir", &d("train"),
    ]);
    run(&[
        "collect-grads", "--env", ENV, "--optimizer", "rmsprop", "--lr", "0.003",
        "--iterations", "30", "--coords", "50", "--seed", "3", "--out-dir", &d("collect"),
    ]);
    run(&[
        "identity", "--mode", "processed", "--dataset", grads.to_str().expect("utf-8"),
        "--epochs", "3", "--out-dir", &d("identity"),
    ]);
    run(&[
        "meta-train", "--units", "4", "--reset-interval", "8", "--iterations", "12", "--seed",
        "3", "--out-dir", &d("meta"),
    ]);
    run(&[
        "eval", "--checkpoint", ckpt.to_str().expect("utf-8"), "--env", ENV, "--iterations",
        "40", "--eval-every", "10", "--seeds", "2", "--out-dir", &d("eval"),
    ]);
    let mut files = Vec::new();
    for sub in ["train", "collect", "identity", "meta", "eval"] {
        for e in fs::read_dir(dir.join(sub)).expect("output dir") {
            let p = e.expect("dir entry").path();
            files.push(p.strip_prefix(dir).expect("under dir").to_path_buf());
        }
    }
    files.sort();
    files
}

/// Both runs use the same directory so the resolved configs, which record
/// output paths, are comparable byte for byte.
fn c10_determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let snapshot = |files: &[std::path::PathBuf]| -> Vec<Vec<u8>> {
        files.iter().map(|f| fs::read(dir.path().join(f)).expect("output")).collect()
    };
    let files = cli_pipeline(dir.path());
    let first = snapshot(&files);
    for sub in ["train", "collect", "identity", "meta", "eval"] {
        fs::remove_dir_all(dir.path().join(sub)).expect("clear outputs");
    }
    let same_set = files == cli_pipeline(dir.path());
    let second = snapshot(&files);
    let differ: Vec<String> = files
        .iter()
        .zip(first.iter().zip(&second))
        .filter(|(_, (a, b))| a != b)
        .map(|(f, _)| f.display().to_string())
        .collect();
    Verdict::check(
        same_set && differ.is_empty(),
        format!(
            "train, collect-grads, identity, meta-train, eval run twice; {} files compared, differing: {differ:?}",
            files.len()
        ),
    )
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wants = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut failed = 0;
    let mut report = |label: &str, v: Verdict, secs: f64| {
        let tag = match v.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "INFO",
        };
        println!("criterion {label} {tag} ({secs:.1}s): {}", v.detail);
    };
    let timed = |f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        (v, t.elapsed().as_secs_f64())
    };

    for (n, f) in [
        (1, c1_gradcheck as fn() -> Verdict),
        (2, c2_meta_gradient),
        (3, c3_identity),
        (4, c4_zero_init_is_sign_sgd),
        (5, c5_invariants),
        (6, c6_ages),
    ] {
        if wants(n) {
            let (v, s) = timed(&f);
            report(&n.to_string(), v, s);
        }
    }
    if wants(7) || wants(8) {
        let t = Instant::now();
        let c = classical();
        let secs = t.elapsed().as_secs_f64();
        if wants(7) {
            report("7", c7_classical(&c), secs);
        }
        if wants(8) {
            let t = Instant::now();
            let mut vs = c8_meta_training(&c).into_iter();
            let secs = t.elapsed().as_secs_f64();
            report("8 (gate: beats sign-SGD)", vs.next().expect("gate"), secs);
            report("8 (within 30% of Adam)", vs.next().expect("parity"), 0.0);
        }
    }
    if wants(9) {
        report(
            "9",
            Verdict {
                pass: None,
                detail: "physics-engine benchmarks are out of scope; criteria 1-8 stand in".into(),
            },
            0.0,
        );
    }
    if wants(10) {
        let (v, s) = timed(&c10_determinism);
        report("10", v, s);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
