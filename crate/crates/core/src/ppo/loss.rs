//! Clipped-surrogate PPO objective with clipped value loss and entropy bonus.

use crate::diffcore::{Graph, Tensor, Var};
use crate::env::{Permutation, SwapAction};
use crate::error::{Error, Result};
use crate::model::{forward_graph, BoundParams, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub clip_coef: f32,
    pub value_coef: f32,
    pub entropy_coef: f32,
}

/// A slice of rollout data; `advantages` are expected to be normalized.
#[derive(Clone, Copy, Debug)]
pub struct Minibatch<'a> {
    pub observations: &'a [Permutation],
    pub actions: &'a [SwapAction],
    pub old_log_probs: &'a [f32],
    pub old_values: &'a [f32],
    pub advantages: &'a [f32],
    pub returns: &'a [f32],
}

impl Minibatch<'_> {
    fn check(&self) -> Result<usize> {
        let n = self.observations.len();
        let lens = [
            self.actions.len(),
            self.old_log_probs.len(),
            self.old_values.len(),
            self.advantages.len(),
            self.returns.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::Shape(format!(
                "minibatch of {n} observations with field lengths {lens:?}"
            )));
        }
        Ok(n)
    }
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub ratio: Var,
}

/// Records the PPO loss for `batch` on `graph`.
///
/// With `r = exp(log_pi - log_pi_old)` the policy term is
/// `-mean(min(r A, clip(r, 1 - eps, 1 + eps) A))`; the value term is
/// `0.5 mean(max((v - R)^2, (v_old + clip(v - v_old, -eps, eps) - R)^2))`;
/// the total is `policy + c_v value - c_e entropy`.
pub fn ppo_loss_graph(
    graph: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    batch: &Minibatch<'_>,
    coefs: &LossCoefficients,
) -> Result<LossVars> {
    let n = batch.check()?;
    let eps = coefs.clip_coef;
    let fwd = forward_graph(graph, &params.config, bound, batch.observations)?;

    let log_probs = graph.log_softmax_rows(fwd.logits)?;
    let actions: Vec<usize> = batch.actions.iter().map(|a| a.index()).collect();
    let taken = graph.pick(log_probs, &actions)?;
    let old = graph.constant(Tensor::vector(batch.old_log_probs.to_vec()))?;
    let log_ratio = graph.sub(taken, old)?;
    let ratio = graph.exp(log_ratio)?;
    let adv = graph.constant(Tensor::vector(batch.advantages.to_vec()))?;
    let unclipped = graph.mul(ratio, adv)?;
    let clipped_ratio = graph.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
    let clipped = graph.mul(clipped_ratio, adv)?;
    let surrogate = graph.minimum(unclipped, clipped)?;
    let surrogate = graph.mean(surrogate)?;
    let policy = graph.scale(surrogate, -1.0)?;

    let returns = graph.constant(Tensor::vector(batch.returns.to_vec()))?;
    let old_values = graph.constant(Tensor::vector(batch.old_values.to_vec()))?;
    let err = graph.sub(fwd.values, returns)?;
    let err_sq = graph.square(err)?;
    let delta = graph.sub(fwd.values, old_values)?;
    let delta = graph.clamp(delta, -eps, eps)?;
    let clipped_values = graph.add(old_values, delta)?;
    let clipped_err = graph.sub(clipped_values, returns)?;
    let clipped_err_sq = graph.square(clipped_err)?;
    let worst = graph.maximum(err_sq, clipped_err_sq)?;
    let value = graph.mean(worst)?;
    let value = graph.scale(value, 0.5)?;

    let probs = graph.exp(log_probs)?;
    let plogp = graph.mul(probs, log_probs)?;
    let neg_entropy = graph.sum_rows(plogp)?;
    let neg_entropy = graph.mean(neg_entropy)?;
    let entropy = graph.scale(neg_entropy, -1.0)?;

    let weighted_value = graph.scale(value, coefs.value_coef)?;
    let total = graph.add(policy, weighted_value)?;
    let weighted_entropy = graph.scale(entropy, coefs.entropy_coef)?;
    let total = graph.sub(total, weighted_entropy)?;
    debug_assert_eq!(graph.value(ratio).len(), n);
    Ok(LossVars {
        total,
        policy,
        value,
        entropy,
        ratio,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f32,
    pub policy_loss: f32,
    /// Clipped value loss (already halved).
    pub value_loss: f32,
    pub entropy: f32,
    /// `mean((r - 1) - ln r)`.
    pub approx_kl: f32,
    /// Fraction of samples with `|r - 1| > eps`.
    pub clip_fraction: f32,
    pub mean_ratio: f32,
}

/// Loss diagnostics and gradients, in [`ModelParams::named_tensors`] order.
pub fn ppo_loss(
    params: &ModelParams,
    batch: &Minibatch<'_>,
    coefs: &LossCoefficients,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut graph = Graph::new();
    let bound = BoundParams::bind(&mut graph, params)?;
    let vars = ppo_loss_graph(&mut graph, params, &bound, batch, coefs)?;
    let mut grads = graph.backward(vars.total)?;
    let grads = bound
        .vars()
        .into_iter()
        .map(|v| grads.take(v).expect("params always receive a gradient"))
        .collect();

    let ratios = graph.value(vars.ratio).data();
    let n = ratios.len() as f64;
    let approx_kl = ratios
        .iter()
        .map(|&r| (f64::from(r) - 1.0) - f64::from(r).ln())
        .sum::<f64>()
        / n;
    let clipped = ratios
        .iter()
        .filter(|&&r| (r - 1.0).abs() > coefs.clip_coef)
        .count();
    let report = LossReport {
        total: graph.value(vars.total).item()?,
        policy_loss: graph.value(vars.policy).item()?,
        value_loss: graph.value(vars.value).item()?,
        entropy: graph.value(vars.entropy).item()?,
        approx_kl: approx_kl as f32,
        clip_fraction: (clipped as f64 / n) as f32,
        mean_ratio: (ratios.iter().map(|&r| f64::from(r)).sum::<f64>() / n) as f32,
    };
    Ok((report, grads))
}
