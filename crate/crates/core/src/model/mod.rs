//! Single-head causal attention policy with separate actor and critic heads.
//!
//! The network is deliberately bare: token and position embeddings are
//! summed, passed through one (or two) causal self-attention blocks with no
//! residual path, normalization or MLP, and the attention output at the last
//! position feeds two linear heads. Every forward pass records the attention
//! scores and weights so the probes can read them.

mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{causal_mask, log_softmax_into, Graph, Tensor, Var};
use crate::env::{Permutation, SwapAction, MAX_LENGTH, MIN_LENGTH};
use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT_VERSION,
};

pub const MIN_EMBED_DIM: usize = 2;
pub const MAX_EMBED_DIM: usize = 128;

/// Gain of the orthogonal actor-head init; small so the initial policy is
/// close to uniform.
const ACTOR_INIT_GAIN: f32 = 0.01;
const CRITIC_INIT_GAIN: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub length: usize,
    /// Embedding width, also the query/key width.
    pub embed_dim: usize,
    pub num_layers: usize,
}

impl ModelConfig {
    pub fn new(length: usize, embed_dim: usize) -> Self {
        Self {
            length,
            embed_dim,
            num_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_LENGTH..=MAX_LENGTH).contains(&self.length) {
            return Err(Error::Config(format!(
                "length must be in [{MIN_LENGTH}, {MAX_LENGTH}], got {}",
                self.length
            )));
        }
        if !(MIN_EMBED_DIM..=MAX_EMBED_DIM).contains(&self.embed_dim) {
            return Err(Error::Config(format!(
                "embed_dim must be in [{MIN_EMBED_DIM}, {MAX_EMBED_DIM}], got {}",
                self.embed_dim
            )));
        }
        if !(1..=2).contains(&self.num_layers) {
            return Err(Error::Config(format!(
                "num_layers must be 1 or 2, got {}",
                self.num_layers
            )));
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.length - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Every learnable array of the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Row `t - 1` embeds token id `t`.
    pub token_embed: Tensor,
    pub position_embed: Tensor,
    pub layers: Vec<AttentionWeights>,
    pub actor_weight: Tensor,
    pub actor_bias: Tensor,
    pub critic_weight: Tensor,
    pub critic_bias: Tensor,
}

impl ModelParams {
    /// Random initialization, deterministic in the state of `rng`.
    ///
    /// Embeddings and projections are drawn from `N(0, 1/d)`. The heads get
    /// scaled orthogonal matrices and zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (l, d) = (config.length, config.embed_dim);
        let normal = Normal::new(0.0, 1.0 / (d as f32).sqrt()).expect("positive std");
        let mut gaussian = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::matrix(rows, cols, data).expect("shape matches data")
        };
        let token_embed = gaussian(l, d);
        let position_embed = gaussian(l, d);
        let layers = (0..config.num_layers)
            .map(|_| AttentionWeights {
                query: gaussian(d, d),
                key: gaussian(d, d),
                value: gaussian(d, d),
            })
            .collect();
        let actor_weight = orthogonal(d, l - 1, ACTOR_INIT_GAIN, rng);
        let critic_weight = orthogonal(d, 1, CRITIC_INIT_GAIN, rng);
        Ok(Self {
            config,
            token_embed,
            position_embed,
            layers,
            actor_weight,
            actor_bias: Tensor::zeros(&[l - 1]),
            critic_weight,
            critic_bias: Tensor::zeros(&[1]),
        })
    }

    /// Parameter arrays with their names, in the fixed order used by
    /// checkpoints, the optimizer and [`BoundParams::vars`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embed".to_string(), &self.token_embed),
            ("position_embed".to_string(), &self.position_embed),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.query"), &layer.query));
            out.push((format!("layer{i}.key"), &layer.key));
            out.push((format!("layer{i}.value"), &layer.value));
        }
        out.push(("actor_weight".into(), &self.actor_weight));
        out.push(("actor_bias".into(), &self.actor_bias));
        out.push(("critic_weight".into(), &self.critic_weight));
        out.push(("critic_bias".into(), &self.critic_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embed, &mut self.position_embed];
        for layer in &mut self.layers {
            out.push(&mut layer.query);
            out.push(&mut layer.key);
            out.push(&mut layer.value);
        }
        out.push(&mut self.actor_weight);
        out.push(&mut self.actor_bias);
        out.push(&mut self.critic_weight);
        out.push(&mut self.critic_bias);
        out
    }

    /// Expected `(name, shape)` list for a configuration.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (l, d) = (config.length, config.embed_dim);
        let mut out = vec![
            ("token_embed".to_string(), vec![l, d]),
            ("position_embed".to_string(), vec![l, d]),
        ];
        for i in 0..config.num_layers {
            for name in ["query", "key", "value"] {
                out.push((format!("layer{i}.{name}"), vec![d, d]));
            }
        }
        out.push(("actor_weight".into(), vec![d, l - 1]));
        out.push(("actor_bias".into(), vec![l - 1]));
        out.push(("critic_weight".into(), vec![d, 1]));
        out.push(("critic_bias".into(), vec![1]));
        out
    }

    /// Rebuilds parameters from tensors listed in [`Self::layout`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if tensors.len() != layout.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embed = next();
        let position_embed = next();
        let layers = (0..config.num_layers)
            .map(|_| AttentionWeights {
                query: next(),
                key: next(),
                value: next(),
            })
            .collect();
        Ok(Self {
            config,
            token_embed,
            position_embed,
            layers,
            actor_weight: next(),
            actor_bias: next(),
            critic_weight: next(),
            critic_bias: next(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// `rows x cols` matrix with orthonormal columns (or rows, when wide),
/// scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f32, rng: &mut R) -> Tensor {
    let (n, k) = (rows.max(cols), rows.min(cols));
    // k orthonormal vectors of length n via modified Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            let (r, c) = if rows >= cols { (i, j) } else { (j, i) };
            data[r * cols + c] = gain * x as f32;
        }
    }
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Parameters registered as leaves of a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub token_embed: Var,
    pub position_embed: Var,
    pub layers: Vec<[Var; 3]>,
    pub actor_weight: Var,
    pub actor_bias: Var,
    pub critic_weight: Var,
    pub critic_bias: Var,
}

impl BoundParams {
    pub fn bind(graph: &mut Graph, params: &ModelParams) -> Result<Self> {
        Ok(Self {
            token_embed: graph.param(params.token_embed.clone())?,
            position_embed: graph.param(params.position_embed.clone())?,
            layers: params
                .layers
                .iter()
                .map(|l| {
                    Ok([
                        graph.param(l.query.clone())?,
                        graph.param(l.key.clone())?,
                        graph.param(l.value.clone())?,
                    ])
                })
                .collect::<Result<_>>()?,
            actor_weight: graph.param(params.actor_weight.clone())?,
            actor_bias: graph.param(params.actor_bias.clone())?,
            critic_weight: graph.param(params.critic_weight.clone())?,
            critic_bias: graph.param(params.critic_bias.clone())?,
        })
    }

    /// Same order as [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embed, self.position_embed];
        for layer in &self.layers {
            out.extend_from_slice(layer);
        }
        out.extend([
            self.actor_weight,
            self.actor_bias,
            self.critic_weight,
            self.critic_bias,
        ]);
        out
    }
}

/// Graph handles produced by [`forward_graph`] for a batch of `b` inputs.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[b, len - 1]`
    pub logits: Var,
    /// `[b]`
    pub values: Var,
    /// Per layer, scaled pre-softmax scores `[b, len, len]` (masked entries
    /// hold their raw, unused value).
    pub scores: Vec<Var>,
    /// Per layer, post-softmax weights `[b, len, len]`.
    pub weights: Vec<Var>,
}

/// Batched forward pass recorded on `graph`.
pub fn forward_graph(
    graph: &mut Graph,
    config: &ModelConfig,
    params: &BoundParams,
    batch: &[Permutation],
) -> Result<ForwardVars> {
    let (l, d) = (config.length, config.embed_dim);
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut token_ids = Vec::with_capacity(b * l);
    for p in batch {
        if p.len() != l {
            return Err(Error::Contract(format!(
                "permutation of length {} for a length-{l} model",
                p.len()
            )));
        }
        token_ids.extend(p.tokens().iter().map(|&t| t as usize - 1));
    }
    let position_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();

    let tokens = graph.embedding_lookup(params.token_embed, &token_ids)?;
    let positions = graph.embedding_lookup(params.position_embed, &position_ids)?;
    let mut x = graph.add(tokens, positions)?;

    let mask = causal_mask(l);
    let inv_sqrt_dk = 1.0 / (d as f32).sqrt();
    let mut scores = Vec::with_capacity(params.layers.len());
    let mut weights = Vec::with_capacity(params.layers.len());
    for &[wq, wk, wv] in &params.layers {
        let q = graph.matmul(x, wq)?;
        let k = graph.matmul(x, wk)?;
        let v = graph.matmul(x, wv)?;
        let q = graph.reshape(q, &[b, l, d])?;
        let k = graph.reshape(k, &[b, l, d])?;
        let v = graph.reshape(v, &[b, l, d])?;
        let kt = graph.transpose(k)?;
        let s = graph.matmul(q, kt)?;
        let s = graph.scale(s, inv_sqrt_dk)?;
        let a = graph.masked_softmax_rows(s, &mask)?;
        let out = graph.matmul(a, v)?;
        x = graph.reshape(out, &[b * l, d])?;
        scores.push(s);
        weights.push(a);
    }

    let last_rows: Vec<usize> = (0..b).map(|i| i * l + l - 1).collect();
    let hidden = graph.embedding_lookup(x, &last_rows)?;
    let logits = graph.matmul(hidden, params.actor_weight)?;
    let logits = graph.add_row_bias(logits, params.actor_bias)?;
    let values = graph.matmul(hidden, params.critic_weight)?;
    let values = graph.add_row_bias(values, params.critic_bias)?;
    let values = graph.reshape(values, &[b])?;
    Ok(ForwardVars {
        logits,
        values,
        scores,
        weights,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Row-major `len x len` scaled scores; masked entries are `-inf`.
    pub scores: Vec<f32>,
    /// Row-major `len x len` post-softmax weights.
    pub weights: Vec<f32>,
}

/// Attention record of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub length: usize,
    pub layers: Vec<LayerTrace>,
    /// Final-layer last-row scores (all `len` entries are unmasked).
    pub last_row_scores: Vec<f32>,
    /// Final-layer last-row weights.
    pub last_row_weights: Vec<f32>,
}

impl AttentionTrace {
    pub fn weight_row(&self, layer: usize, row: usize) -> &[f32] {
        let l = self.length;
        &self.layers[layer].weights[row * l..(row + 1) * l]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub action_logits: Vec<f32>,
    pub value: f32,
    pub trace: AttentionTrace,
}

impl PolicyOutput {
    pub fn greedy_action(&self) -> SwapAction {
        greedy_from_logits(&self.action_logits)
    }

    pub fn log_probs(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.action_logits.len()];
        log_softmax_into(&self.action_logits, &mut out);
        out
    }
}

/// Forward pass for a batch, with traces. Outputs are independent of how
/// inputs are batched.
pub fn forward_batch(params: &ModelParams, batch: &[Permutation]) -> Result<Vec<PolicyOutput>> {
    let config = params.config;
    let l = config.length;
    let a = config.num_actions();
    let mut graph = Graph::new();
    let bound = BoundParams::bind(&mut graph, params)?;
    let vars = forward_graph(&mut graph, &config, &bound, batch)?;
    let logits = graph.value(vars.logits).data();
    let values = graph.value(vars.values).data();
    let mask = causal_mask(l);

    Ok((0..batch.len())
        .map(|i| {
            let layers: Vec<LayerTrace> = vars
                .scores
                .iter()
                .zip(&vars.weights)
                .map(|(&s, &w)| {
                    let block = i * l * l..(i + 1) * l * l;
                    let scores = graph.value(s).data()[block.clone()]
                        .iter()
                        .zip(&mask)
                        .map(|(&v, &visible)| if visible { v } else { f32::NEG_INFINITY })
                        .collect();
                    LayerTrace {
                        scores,
                        weights: graph.value(w).data()[block].to_vec(),
                    }
                })
                .collect();
            let last = layers.last().expect("at least one layer");
            let last_row = (l - 1) * l..l * l;
            let trace = AttentionTrace {
                length: l,
                last_row_scores: last.scores[last_row.clone()].to_vec(),
                last_row_weights: last.weights[last_row].to_vec(),
                layers,
            };
            PolicyOutput {
                action_logits: logits[i * a..(i + 1) * a].to_vec(),
                value: values[i],
                trace,
            }
        })
        .collect())
}

pub fn forward(params: &ModelParams, p: &Permutation) -> Result<PolicyOutput> {
    Ok(forward_batch(params, std::slice::from_ref(p))?.remove(0))
}

/// Argmax with ties going to the lowest index.
pub fn greedy_from_logits(logits: &[f32]) -> SwapAction {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    SwapAction::new(best)
}

/// Categorical draw from `softmax(logits)`; returns the action and its
/// log-probability.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f32], rng: &mut R) -> (SwapAction, f32) {
    let mut log_probs = vec![0.0; logits.len()];
    log_softmax_into(logits, &mut log_probs);
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut chosen = log_probs.len() - 1;
    for (i, &lp) in log_probs.iter().enumerate() {
        cumulative += f64::from(lp).exp();
        if u < cumulative {
            chosen = i;
            break;
        }
    }
    (SwapAction::new(chosen), log_probs[chosen])
}

pub fn act_greedy(params: &ModelParams, p: &Permutation) -> Result<SwapAction> {
    Ok(forward(params, p)?.greedy_action())
}

/// Sampled action, its log-probability and the critic's value estimate.
pub fn act_sample<R: Rng + ?Sized>(
    params: &ModelParams,
    p: &Permutation,
    rng: &mut R,
) -> Result<(SwapAction, f32, f32)> {
    let out = forward(params, p)?;
    let (action, log_prob) = sample_from_logits(&out.action_logits, rng);
    Ok((action, log_prob, out.value))
}
