//! Proximal policy optimization for the sorting policy.

mod loss;
mod rollout;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, AdamConfig, OptimizerState};
use crate::env::{EnvConfig, Permutation, SwapAction};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub use loss::{ppo_loss, ppo_loss_graph, LossCoefficients, LossReport, LossVars, Minibatch};
pub use rollout::{
    collect_rollout, env_seed, gae, policy_batch, EpisodeStats, GaeStep, RolloutBuffer,
    RolloutPolicy, VecEnv,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub total_timesteps: u64,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub learning_rate: f32,
    pub gamma: f32,
    pub gae_lambda: f32,
    pub num_minibatches: usize,
    pub clip_coef: f32,
    pub entropy_coef: f32,
    pub value_coef: f32,
    pub max_grad_norm: f32,
    pub update_epochs: usize,
    /// Checkpoints are emitted each time training crosses another
    /// `1 / checkpoint_intervals` of `total_timesteps`, and at the end.
    pub checkpoint_intervals: u64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 1_000_000,
            num_envs: 8,
            rollout_steps: 128,
            learning_rate: 2.5e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            num_minibatches: 4,
            clip_coef: 0.1,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            update_epochs: 4,
            checkpoint_intervals: 10,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn batch_size(&self) -> usize {
        self.num_envs * self.rollout_steps
    }

    pub fn minibatch_size(&self) -> usize {
        self.batch_size() / self.num_minibatches
    }

    /// Number of collect/optimize iterations; the last one may overshoot
    /// `total_timesteps` by less than one rollout.
    pub fn num_updates(&self) -> u64 {
        self.total_timesteps.div_ceil(self.batch_size() as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("clip_coef", self.clip_coef),
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.gamma > 1.0 || self.gae_lambda > 1.0 {
            return Err(Error::Config(
                "gamma and gae_lambda must be at most 1".into(),
            ));
        }
        let counts = [
            ("total_timesteps", self.total_timesteps as usize),
            ("num_envs", self.num_envs),
            ("rollout_steps", self.rollout_steps),
            ("num_minibatches", self.num_minibatches),
            ("update_epochs", self.update_epochs),
            ("checkpoint_intervals", self.checkpoint_intervals as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.batch_size().is_multiple_of(self.num_minibatches) {
            return Err(Error::Config(format!(
                "num_envs * rollout_steps = {} is not divisible by num_minibatches = {}",
                self.batch_size(),
                self.num_minibatches
            )));
        }
        Ok(())
    }

    fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            clip_coef: self.clip_coef,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }
}

/// Diagnostics of one collect/optimize iteration. Loss terms are averaged
/// over every minibatch step of the iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub update: u64,
    pub global_step: u64,
    pub policy_loss: f32,
    pub value_loss: f32,
    pub entropy: f32,
    pub approx_kl: f32,
    pub clip_fraction: f32,
    pub grad_norm: f32,
    pub episodes: usize,
    pub mean_episode_return: Option<f64>,
    pub mean_episode_length: Option<f64>,
    /// Fraction of finished episodes that ended sorted rather than truncated.
    pub sorted_fraction: Option<f64>,
}

/// Hooks called by [`train`]. Errors abort training.
pub trait TrainObserver {
    fn on_update(&mut self, _record: &TrainRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _global_step: u64, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainRecord>,
    pub global_step: u64,
}

/// Zero-mean, unit (population) standard deviation copy of `values`.
pub fn normalize_advantages(values: &[f32]) -> Vec<f32> {
    let n = values.len() as f64;
    if values.len() < 2 {
        return values.to_vec();
    }
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt() + 1e-8;
    values
        .iter()
        .map(|&v| ((f64::from(v) - mean) / std) as f32)
        .collect()
}

/// Full training run. Deterministic in `(cfg, model_cfg, env_cfg)`.
///
/// The model initialization and action sampling draw from streams seeded by
/// `cfg.seed`; environments draw from streams derived from `env_cfg.seed`.
pub fn train<O: TrainObserver + ?Sized>(
    cfg: &PpoConfig,
    model_cfg: ModelConfig,
    env_cfg: &EnvConfig,
    observer: &mut O,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    env_cfg.validate()?;
    if model_cfg.length != env_cfg.length {
        return Err(Error::Config(format!(
            "model length {} differs from environment length {}",
            model_cfg.length, env_cfg.length
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model_cfg, &mut init_rng)?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut envs = VecEnv::new(env_cfg, cfg.num_envs)?;
    let mut buffer = RolloutBuffer::new(cfg.num_envs, cfg.rollout_steps);
    let mut optimizer = OptimizerState::new(
        params.named_tensors().into_iter().map(|(_, t)| t),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            clip_norm: cfg.max_grad_norm,
            ..AdamConfig::default()
        },
    );
    let coefs = cfg.coefficients();
    let batch = cfg.batch_size();
    let mb_size = cfg.minibatch_size();

    let mut log = Vec::with_capacity(cfg.num_updates() as usize);
    let mut global_step = 0u64;
    let mut last_bucket = 0u64;
    let mut indices: Vec<usize> = (0..batch).collect();

    for update in 1..=cfg.num_updates() {
        buffer.clear();
        collect_rollout(&mut envs, &params, &mut buffer, &mut sample_rng)?;
        global_step += batch as u64;
        buffer.compute_gae(cfg.gamma, cfg.gae_lambda)?;
        let advantages = normalize_advantages(&buffer.advantages);

        let mut sums = [0.0f64; 6];
        let mut steps = 0usize;
        for _ in 0..cfg.update_epochs {
            indices.shuffle(&mut sample_rng);
            for chunk in indices.chunks(mb_size) {
                let gather_f =
                    |src: &[f32]| -> Vec<f32> { chunk.iter().map(|&i| src[i]).collect() };
                let observations: Vec<Permutation> = chunk
                    .iter()
                    .map(|&i| buffer.observations[i].clone())
                    .collect();
                let actions: Vec<SwapAction> = chunk.iter().map(|&i| buffer.actions[i]).collect();
                let (old_log_probs, old_values) =
                    (gather_f(&buffer.log_probs), gather_f(&buffer.values));
                let (mb_adv, returns) = (gather_f(&advantages), gather_f(&buffer.returns));
                let mb = Minibatch {
                    observations: &observations,
                    actions: &actions,
                    old_log_probs: &old_log_probs,
                    old_values: &old_values,
                    advantages: &mb_adv,
                    returns: &returns,
                };
                let (report, grads) = ppo_loss(&params, &mb, &coefs)?;
                let stats = adam_step(&mut params.tensors_mut(), &grads, &mut optimizer)?;
                for (acc, v) in sums.iter_mut().zip([
                    report.policy_loss,
                    report.value_loss,
                    report.entropy,
                    report.approx_kl,
                    report.clip_fraction,
                    stats.grad_norm,
                ]) {
                    *acc += f64::from(v);
                }
                steps += 1;
            }
        }

        let mean = |k: usize| (sums[k] / steps as f64) as f32;
        let episodes = &buffer.episodes;
        let avg = |f: fn(&EpisodeStats) -> f64| {
            (!episodes.is_empty())
                .then(|| episodes.iter().map(f).sum::<f64>() / episodes.len() as f64)
        };
        let record = TrainRecord {
            update,
            global_step,
            policy_loss: mean(0),
            value_loss: mean(1),
            entropy: mean(2),
            approx_kl: mean(3),
            clip_fraction: mean(4),
            grad_norm: mean(5),
            episodes: episodes.len(),
            mean_episode_return: avg(|e| e.episode_return),
            mean_episode_length: avg(|e| e.length as f64),
            sorted_fraction: avg(|e| if e.sorted { 1.0 } else { 0.0 }),
        };
        observer.on_update(&record)?;
        log.push(record);

        let bucket = (global_step * cfg.checkpoint_intervals / cfg.total_timesteps)
            .min(cfg.checkpoint_intervals);
        if bucket > last_bucket || update == cfg.num_updates() {
            observer.on_checkpoint(global_step, &params)?;
            last_bucket = bucket;
        }
    }

    Ok(TrainOutcome {
        params,
        log,
        global_step,
    })
}
