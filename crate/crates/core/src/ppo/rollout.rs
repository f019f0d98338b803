//! Vectorized environments, on-policy rollout storage and generalized
//! advantage estimation.
//!
//! Storage is flat with index `step * num_envs + env`.

use rand::Rng;

use crate::diffcore::Graph;
use crate::env::{EnvConfig, Permutation, SortEnv, SwapAction};
use crate::error::{Error, Result};
use crate::model::{forward_graph, sample_from_logits, BoundParams, ModelParams};

/// Anything that can pick actions for a batch of states during collection.
pub trait RolloutPolicy {
    /// For each state, a sampled action, its log-probability and a value
    /// estimate.
    fn act_batch<R: Rng + ?Sized>(
        &self,
        states: &[Permutation],
        rng: &mut R,
    ) -> Result<Vec<(SwapAction, f32, f32)>>;

    fn value_batch(&self, states: &[Permutation]) -> Result<Vec<f32>>;
}

/// Logits and values for a batch without trace capture.
pub fn policy_batch(params: &ModelParams, states: &[Permutation]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut graph = Graph::new();
    let bound = BoundParams::bind(&mut graph, params)?;
    let vars = forward_graph(&mut graph, &params.config, &bound, states)?;
    Ok((
        graph.value(vars.logits).data().to_vec(),
        graph.value(vars.values).data().to_vec(),
    ))
}

impl RolloutPolicy for ModelParams {
    fn act_batch<R: Rng + ?Sized>(
        &self,
        states: &[Permutation],
        rng: &mut R,
    ) -> Result<Vec<(SwapAction, f32, f32)>> {
        let (logits, values) = policy_batch(self, states)?;
        let a = self.config.num_actions();
        Ok(logits
            .chunks(a)
            .zip(values)
            .map(|(row, v)| {
                let (action, log_prob) = sample_from_logits(row, rng);
                (action, log_prob, v)
            })
            .collect())
    }

    fn value_batch(&self, states: &[Permutation]) -> Result<Vec<f32>> {
        Ok(policy_batch(self, states)?.1)
    }
}

/// Seed of the `index`-th environment derived from a run seed.
pub fn env_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fixed set of environments stepped in lockstep, auto-resetting on
/// episode end.
#[derive(Clone, Debug)]
pub struct VecEnv {
    envs: Vec<SortEnv>,
    episode_returns: Vec<f64>,
}

impl VecEnv {
    pub fn new(cfg: &EnvConfig, num_envs: usize) -> Result<Self> {
        if num_envs == 0 {
            return Err(Error::Config("num_envs must be positive".into()));
        }
        let envs = (0..num_envs)
            .map(|i| {
                SortEnv::new(EnvConfig {
                    seed: env_seed(cfg.seed, i),
                    ..cfg.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            envs,
            episode_returns: vec![0.0; num_envs],
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn states(&self) -> Vec<Permutation> {
        self.envs.iter().map(|e| e.state().clone()).collect()
    }

    pub fn length(&self) -> usize {
        self.envs[0].config().length
    }
}

/// A finished episode observed during collection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub length: usize,
    pub sorted: bool,
}

#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub num_steps: usize,
    pub observations: Vec<Permutation>,
    pub actions: Vec<SwapAction>,
    pub log_probs: Vec<f32>,
    pub rewards: Vec<f32>,
    pub values: Vec<f32>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// Value of the final state of a truncated episode, 0 elsewhere.
    pub bootstrap_values: Vec<f32>,
    /// Value of each environment's state after the last collected step.
    pub last_values: Vec<f32>,
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
    pub episodes: Vec<EpisodeStats>,
}

impl RolloutBuffer {
    pub fn new(num_envs: usize, num_steps: usize) -> Self {
        let n = num_envs * num_steps;
        Self {
            num_envs,
            num_steps,
            observations: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            terminated: Vec::with_capacity(n),
            truncated: Vec::with_capacity(n),
            bootstrap_values: Vec::with_capacity(n),
            last_values: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            episodes: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.num_envs * self.num_steps
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity() && self.last_values.len() == self.num_envs
    }

    pub fn clear(&mut self) {
        self.observations.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.rewards.clear();
        self.values.clear();
        self.terminated.clear();
        self.truncated.clear();
        self.bootstrap_values.clear();
        self.last_values.clear();
        self.advantages.clear();
        self.returns.clear();
        self.episodes.clear();
    }

    /// Fills `advantages` and `returns` from the stored trajectory.
    pub fn compute_gae(&mut self, gamma: f32, lambda: f32) -> Result<()> {
        if !self.is_full() {
            return Err(Error::Contract("GAE on a partially filled buffer".into()));
        }
        let (n, t_max) = (self.num_envs, self.num_steps);
        self.advantages = vec![0.0; n * t_max];
        for e in 0..n {
            let steps: Vec<GaeStep> = (0..t_max)
                .map(|t| {
                    let i = t * n + e;
                    let next_value = if self.truncated[i] {
                        self.bootstrap_values[i]
                    } else if t + 1 < t_max {
                        self.values[i + n]
                    } else {
                        self.last_values[e]
                    };
                    GaeStep {
                        reward: self.rewards[i],
                        value: self.values[i],
                        next_value,
                        terminated: self.terminated[i],
                        truncated: self.truncated[i],
                    }
                })
                .collect();
            for (t, a) in gae(&steps, gamma, lambda).into_iter().enumerate() {
                self.advantages[t * n + e] = a;
            }
        }
        self.returns = self
            .advantages
            .iter()
            .zip(&self.values)
            .map(|(a, v)| a + v)
            .collect();
        Ok(())
    }
}

/// One transition as seen by [`gae`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaeStep {
    pub reward: f32,
    pub value: f32,
    /// `V(s_{t+1})`: the next stored value, the bootstrap value on
    /// truncation, or anything on termination (it is ignored).
    pub next_value: f32,
    pub terminated: bool,
    pub truncated: bool,
}

/// Generalized advantage estimates for one environment's consecutive steps.
///
/// `delta_t = r_t + gamma * V(s_{t+1}) * (1 - terminated_t) - V(s_t)` and
/// `A_t = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}`, where `done`
/// covers both termination and truncation.
pub fn gae(steps: &[GaeStep], gamma: f32, lambda: f32) -> Vec<f32> {
    let (gamma, lambda) = (f64::from(gamma), f64::from(lambda));
    let mut out = vec![0.0; steps.len()];
    let mut next_advantage = 0.0_f64;
    for (t, s) in steps.iter().enumerate().rev() {
        let bootstrap = if s.terminated {
            0.0
        } else {
            f64::from(s.next_value)
        };
        let delta = f64::from(s.reward) + gamma * bootstrap - f64::from(s.value);
        let carry = if s.terminated || s.truncated {
            0.0
        } else {
            next_advantage
        };
        next_advantage = delta + gamma * lambda * carry;
        out[t] = next_advantage as f32;
    }
    out
}

/// Runs `buffer.num_steps` lockstep steps across `envs`, resetting finished
/// environments. Episodes may span rollouts; `envs` keeps their running
/// returns.
pub fn collect_rollout<P: RolloutPolicy, R: Rng + ?Sized>(
    envs: &mut VecEnv,
    policy: &P,
    buffer: &mut RolloutBuffer,
    rng: &mut R,
) -> Result<()> {
    if !buffer.is_empty() {
        return Err(Error::Contract(
            "collect_rollout needs an empty buffer".into(),
        ));
    }
    if buffer.num_envs != envs.len() {
        return Err(Error::Contract(format!(
            "buffer sized for {} envs, got {}",
            buffer.num_envs,
            envs.len()
        )));
    }
    for _ in 0..buffer.num_steps {
        let states = envs.states();
        let decisions = policy.act_batch(&states, rng)?;
        let mut truncated_states = Vec::new();
        let mut truncated_slots = Vec::new();
        for (e, (state, (action, log_prob, value))) in states.into_iter().zip(decisions).enumerate()
        {
            let env = &mut envs.envs[e];
            let outcome = env.step(action)?;
            envs.episode_returns[e] += f64::from(outcome.reward);
            buffer.observations.push(state);
            buffer.actions.push(action);
            buffer.log_probs.push(log_prob);
            buffer.values.push(value);
            buffer.rewards.push(outcome.reward);
            buffer.terminated.push(outcome.terminated);
            buffer.truncated.push(outcome.truncated);
            buffer.bootstrap_values.push(0.0);
            if outcome.done() {
                buffer.episodes.push(EpisodeStats {
                    episode_return: envs.episode_returns[e],
                    length: env.episode_steps(),
                    sorted: outcome.terminated,
                });
                envs.episode_returns[e] = 0.0;
                if outcome.truncated {
                    truncated_states.push(outcome.next_state.clone());
                    truncated_slots.push(buffer.bootstrap_values.len() - 1);
                }
                env.reset();
            }
        }
        if !truncated_states.is_empty() {
            let values = policy.value_batch(&truncated_states)?;
            for (slot, v) in truncated_slots.into_iter().zip(values) {
                buffer.bootstrap_values[slot] = v;
            }
        }
    }
    buffer.last_values = policy.value_batch(&envs.states())?;
    Ok(())
}
