use permsort_core::env::{EnvConfig, Permutation, SwapAction};
use permsort_core::model::{forward_batch, ModelConfig, ModelParams};
use permsort_core::ppo::{
    collect_rollout, ppo_loss, train, LossCoefficients, Minibatch, PpoConfig, RolloutBuffer, VecEnv,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const COEFS: LossCoefficients = LossCoefficients {
    clip_coef: 0.1,
    value_coef: 0.5,
    entropy_coef: 0.01,
};

struct Batch {
    obs: Vec<Permutation>,
    actions: Vec<SwapAction>,
    old_log_probs: Vec<f32>,
    old_values: Vec<f32>,
    advantages: Vec<f32>,
    returns: Vec<f32>,
}

impl Batch {
    fn view(&self) -> Minibatch<'_> {
        Minibatch {
            observations: &self.obs,
            actions: &self.actions,
            old_log_probs: &self.old_log_probs,
            old_values: &self.old_values,
            advantages: &self.advantages,
            returns: &self.returns,
        }
    }
}

/// Old log-probs and values shifted off the current ones, some inside and
/// some outside the clip range, none near a clip boundary.
fn shifted_batch(params: &ModelParams) -> Batch {
    let mut obs: Vec<Permutation> = Permutation::all_unsorted(3).unwrap().collect();
    obs.extend(obs.clone());
    let outs = forward_batch(params, &obs).unwrap();
    let shifts = [0.03, -0.04, 0.3, -0.25, 0.0, 0.05, -0.2, 0.02, 0.4, -0.03];
    let actions: Vec<SwapAction> = (0..obs.len()).map(|i| SwapAction::new(i % 2)).collect();
    let old_log_probs = outs
        .iter()
        .zip(&actions)
        .zip(shifts)
        .map(|((o, a), s)| o.log_probs()[a.index()] + s)
        .collect();
    let old_values = outs.iter().zip(shifts).map(|(o, s)| o.value - s).collect();
    Batch {
        obs,
        actions,
        old_log_probs,
        old_values,
        advantages: vec![0.8, -1.2, 0.5, 1.5, -0.3, -0.9, 1.1, 0.2, -1.4, 0.6],
        returns: vec![0.9, 0.1, -0.4, 0.7, 0.3, 1.0, -0.2, 0.5, 0.8, -0.6],
    }
}

#[test]
fn ppo_loss_matches_finite_differences() {
    let cfg = ModelConfig::new(3, 4);
    for seed in 0..3 {
        let params = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let batch = shifted_batch(&params);
        let (_, grads) = ppo_loss(&params, &batch.view(), &COEFS).unwrap();
        let loss_at =
            |p: &ModelParams| f64::from(ppo_loss(p, &batch.view(), &COEFS).unwrap().0.total);
        let h = 1e-3f32;
        let mut worst = 0.0f32;
        for (i, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = params.clone();
                plus.tensors_mut()[i].data_mut()[j] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[i].data_mut()[j] -= h;
                let numeric = ((loss_at(&plus) - loss_at(&minus)) / (2.0 * f64::from(h))) as f32;
                let analytic = g.data()[j];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-2, "seed {seed}: worst relative error {worst}");
    }
}

#[test]
fn ratio_is_one_before_the_first_update() {
    let params =
        ModelParams::init(ModelConfig::new(4, 8), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut envs = VecEnv::new(&EnvConfig::new(4, 1), 8).unwrap();
    let mut buffer = RolloutBuffer::new(8, 32);
    collect_rollout(
        &mut envs,
        &params,
        &mut buffer,
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    buffer.compute_gae(0.99, 0.95).unwrap();
    let n = 64;
    let mb = Minibatch {
        observations: &buffer.observations[..n],
        actions: &buffer.actions[..n],
        old_log_probs: &buffer.log_probs[..n],
        old_values: &buffer.values[..n],
        advantages: &buffer.advantages[..n],
        returns: &buffer.returns[..n],
    };
    let (report, _) = ppo_loss(&params, &mb, &COEFS).unwrap();
    assert!((report.mean_ratio - 1.0).abs() < 1e-6);
    assert_eq!(report.clip_fraction, 0.0);
    assert!(report.approx_kl.abs() < 1e-6);
}

#[test]
fn training_is_deterministic() {
    let cfg = PpoConfig {
        total_timesteps: 4096,
        seed: 5,
        ..PpoConfig::default()
    };
    let run = || train(&cfg, ModelConfig::new(4, 8), &EnvConfig::new(4, 5), &mut ()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.global_step, 4096);

    let other = train(
        &PpoConfig {
            seed: 6,
            ..cfg.clone()
        },
        ModelConfig::new(4, 8),
        &EnvConfig::new(4, 6),
        &mut (),
    )
    .unwrap();
    assert_ne!(a.params, other.params);
}
