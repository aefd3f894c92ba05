use optim4rl::gradcheck::{gradcheck, network_suite};
use optim4rl::meta::{self, MetaTrainConfig, MetaTrainer};
use optim4rl::optimizers::{self, LearnedKind};
use optim4rl::params::ParamTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The unrolled outer loss crosses many relu kinks inside the learned rule, so
/// the meta check differences on a finer step.
const META_STEP: f64 = 1e-5;

#[test]
fn networks_match_finite_differences() {
    let suite = network_suite(100, 1e-4).unwrap();
    assert_eq!(suite.len(), 10);
    for (name, r) in suite {
        assert!(r.checked >= 100, "{name}");
        assert!(r.max_rel_err < 1e-4, "{name}: {r:?}");
    }
}

fn perturbed_phi(kind: LearnedKind, seed: u64) -> ParamTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = optimizers::init_meta(kind, &mut rng);
    let flat: Vec<f64> = phi.flatten().iter().map(|x| x + rng.gen_range(-0.1..0.1)).collect();
    phi.unflatten(&flat).unwrap()
}

#[test]
fn meta_gradient_matches_finite_differences() {
    for kind in [LearnedKind::Optim4Rl, LearnedKind::LinearOptim, LearnedKind::RnnOptim] {
        let cfg = MetaTrainConfig {
            units: 1,
            reset_interval: 4,
            inner_steps: 2,
            kind,
            envs: vec!["small_dense_short".into()],
            ..MetaTrainConfig::default()
        };
        let mut trainer = MetaTrainer::new(cfg).unwrap();
        let phi = perturbed_phi(kind, 4);
        let unit = &mut trainer.units[0];
        let record = unit.meta_window(kind, &phi, 2, true).unwrap().record.unwrap();
        let config = unit.runner.config.clone();
        let alpha = unit.alpha;
        let r = gradcheck(
            &phi,
            |tape, v| meta::window_outer_loss(tape, kind, v, &config, &record, alpha),
            20,
            META_STEP,
            9,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{kind:?}: {r:?}");
    }
}
