//! Interpretability probes over the final attention row.
//!
//! All probes evaluate the greedy (argmax) action on a fixed, duplicate-free
//! set of unsorted start states and read the last row of the final attention
//! layer, either before or after the softmax.
//!
//! - sorting accuracy: fraction of states whose greedy swap is correct;
//! - non-inversion proportion: agreement between the token order and the
//!   order of the attention row, over all position pairs;
//! - difference-based swap rule: rank of the chosen swap among consecutive
//!   attention differences, summarized as top-k hit rates;
//! - local greedy trap: wrong swaps made on the steepest local gap;
//! - trace export: heatmap and per-token weight tables for plotting.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Permutation, SwapAction};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelParams};

/// Largest length probed exhaustively; longer lengths use a seeded sample.
pub const EXHAUSTIVE_MAX_LENGTH: usize = 8;
/// Sample size used above [`EXHAUSTIVE_MAX_LENGTH`] (8!).
pub const SAMPLE_SIZE: usize = 40_320;

const BATCH: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    #[default]
    PostSoftmax,
    PreSoftmax,
}

/// Which extreme consecutive difference the agent is assumed to act on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    #[default]
    MostNegative,
    MostPositive,
}

impl SignConvention {
    pub const BOTH: [SignConvention; 2] =
        [SignConvention::MostNegative, SignConvention::MostPositive];

    fn sign(self) -> f32 {
        match self {
            SignConvention::MostNegative => 1.0,
            SignConvention::MostPositive => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub length: usize,
    pub weight_source: WeightSource,
    /// Seed of the sampled evaluation set (lengths above 8 only).
    pub sample_seed: u64,
}

impl ProbeConfig {
    pub fn new(length: usize) -> Self {
        Self {
            length,
            weight_source: WeightSource::PostSoftmax,
            sample_seed: 0,
        }
    }
}

/// The unsorted start states a probe evaluates: all of them up to length 8,
/// otherwise a seeded duplicate-free uniform sample of [`SAMPLE_SIZE`].
pub fn evaluation_set(cfg: &ProbeConfig) -> Result<Vec<Permutation>> {
    if cfg.length <= EXHAUSTIVE_MAX_LENGTH {
        return Ok(Permutation::all_unsorted(cfg.length)?.collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let mut seen = HashSet::with_capacity(SAMPLE_SIZE);
    let mut out = Vec::with_capacity(SAMPLE_SIZE);
    while out.len() < SAMPLE_SIZE {
        let p = Permutation::random_unsorted(cfg.length, &mut rng)?;
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    Ok(out)
}

/// What a probe needs from an agent for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub action: SwapAction,
    /// Last-row pre-softmax scores, one per position.
    pub scores: Vec<f32>,
    /// Last-row post-softmax weights, one per position.
    pub weights: Vec<f32>,
}

impl Inspection {
    pub fn row(&self, source: WeightSource) -> &[f32] {
        match source {
            WeightSource::PostSoftmax => &self.weights,
            WeightSource::PreSoftmax => &self.scores,
        }
    }
}

/// Anything that can be probed: a trained model, or a scripted policy in
/// tests.
pub trait ProbeTarget {
    fn inspect_batch(&self, states: &[Permutation]) -> Result<Vec<Inspection>>;

    /// Full final-layer weight matrix (row-major) for one input, if the
    /// target has one.
    fn attention_matrix(&self, _state: &Permutation) -> Result<Option<Vec<f32>>> {
        Ok(None)
    }
}

impl ProbeTarget for ModelParams {
    fn inspect_batch(&self, states: &[Permutation]) -> Result<Vec<Inspection>> {
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(BATCH) {
            out.extend(forward_batch(self, chunk)?.into_iter().map(|o| Inspection {
                action: o.greedy_action(),
                scores: o.trace.last_row_scores,
                weights: o.trace.last_row_weights,
            }));
        }
        Ok(out)
    }

    fn attention_matrix(&self, state: &Permutation) -> Result<Option<Vec<f32>>> {
        let mut out = forward_batch(self, std::slice::from_ref(state))?;
        let trace = out.remove(0).trace;
        Ok(trace.layers.last().map(|l| l.weights.clone()))
    }
}

/// Evaluation states paired with the target's inspections.
#[derive(Clone, Debug)]
pub struct Observations {
    pub states: Vec<Permutation>,
    pub inspections: Vec<Inspection>,
}

pub fn observe<T: ProbeTarget + ?Sized>(target: &T, cfg: &ProbeConfig) -> Result<Observations> {
    let states = evaluation_set(cfg)?;
    let inspections = target.inspect_batch(&states)?;
    if inspections.len() != states.len() {
        return Err(Error::Contract(
            "probe target returned the wrong number of inspections".into(),
        ));
    }
    for ins in &inspections {
        if ins.scores.len() != cfg.length || ins.weights.len() != cfg.length {
            return Err(Error::Contract(format!(
                "last row of length {} for a length-{} probe",
                ins.weights.len(),
                cfg.length
            )));
        }
    }
    Ok(Observations {
        states,
        inspections,
    })
}

fn check_row(row: &[f32], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(Error::Contract(format!(
            "attention row of length {} for a length-{len} permutation",
            row.len()
        )));
    }
    Ok(())
}

/// Fraction of position pairs `i < j` whose token order agrees with the
/// strict order of `row`. Ties in `row` count as disagreement.
pub fn non_inversion_proportion(row: &[f32], p: &Permutation) -> Result<f64> {
    let len = p.len();
    check_row(row, len)?;
    let t = p.tokens();
    let mut agree = 0usize;
    for i in 0..len {
        for j in i + 1..len {
            let token_up = t[j] > t[i];
            let agrees = if token_up {
                row[j] > row[i]
            } else {
                row[j] < row[i]
            };
            agree += usize::from(agrees);
        }
    }
    Ok(agree as f64 / (len * (len - 1) / 2) as f64)
}

/// 1-based rank of `chosen` when swaps are ordered by
/// `sign * (row[i+1] - row[i])` ascending, ties to the lower index.
pub fn swap_rank(row: &[f32], chosen: SwapAction, sign: SignConvention) -> Result<usize> {
    if row.len() < 2 {
        return Err(Error::Contract("attention row shorter than 2".into()));
    }
    chosen.check(row.len())?;
    let key = |i: usize| sign.sign() * (row[i + 1] - row[i]);
    let c = chosen.index();
    let kc = key(c);
    let ahead = (0..row.len() - 1)
        .filter(|&i| {
            let ki = key(i);
            ki < kc || (ki == kc && i < c)
        })
        .count();
    Ok(ahead + 1)
}

/// A wrong swap made on the adjacent pair with the largest absolute token
/// gap.
pub fn is_greedy_trap(p: &Permutation, action: SwapAction) -> bool {
    if p.is_correct_swap(action) {
        return false;
    }
    let t = p.tokens();
    let gap = |i: usize| t[i].abs_diff(t[i + 1]);
    let widest = (0..t.len() - 1).map(gap).max().unwrap_or(0);
    gap(action.index()) == widest
}

pub fn accuracy_of(obs: &Observations) -> f64 {
    let correct = obs
        .states
        .iter()
        .zip(&obs.inspections)
        .filter(|(p, ins)| p.is_correct_swap(ins.action))
        .count();
    ratio(correct, obs.states.len())
}

pub fn mean_non_inversion_of(obs: &Observations, source: WeightSource) -> Result<f64> {
    let mut total = 0.0;
    for (p, ins) in obs.states.iter().zip(&obs.inspections) {
        total += non_inversion_proportion(ins.row(source), p)?;
    }
    Ok(total / obs.states.len().max(1) as f64)
}

/// Top-k hit rates for `k = 1..len-1` under the convention with the higher
/// top-1 rate (most-negative on ties).
pub fn top_k_of(obs: &Observations, source: WeightSource) -> Result<(SignConvention, Vec<f64>)> {
    let actions = obs.states.first().map_or(0, |p| p.len() - 1);
    let mut best: Option<(SignConvention, Vec<f64>)> = None;
    for convention in SignConvention::BOTH {
        let mut hits = vec![0usize; actions + 1];
        for ins in &obs.inspections {
            hits[swap_rank(ins.row(source), ins.action, convention)?] += 1;
        }
        let mut rates = Vec::with_capacity(actions);
        let mut cumulative = 0;
        for &h in &hits[1..] {
            cumulative += h;
            rates.push(ratio(cumulative, obs.inspections.len()));
        }
        if best.as_ref().is_none_or(|(_, b)| rates[0] > b[0]) {
            best = Some((convention, rates));
        }
    }
    Ok(best.expect("two conventions evaluated"))
}

pub fn trap_rate_of(obs: &Observations) -> f64 {
    let traps = obs
        .states
        .iter()
        .zip(&obs.inspections)
        .filter(|(p, ins)| is_greedy_trap(p, ins.action))
        .count();
    ratio(traps, obs.states.len())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn sorting_accuracy<T: ProbeTarget + ?Sized>(target: &T, cfg: &ProbeConfig) -> Result<f64> {
    Ok(accuracy_of(&observe(target, cfg)?))
}

pub fn top_k_hit_rates<T: ProbeTarget + ?Sized>(
    target: &T,
    cfg: &ProbeConfig,
) -> Result<(SignConvention, BTreeMap<usize, f64>)> {
    let (convention, rates) = top_k_of(&observe(target, cfg)?, cfg.weight_source)?;
    Ok((
        convention,
        rates
            .into_iter()
            .enumerate()
            .map(|(i, r)| (i + 1, r))
            .collect(),
    ))
}

pub fn greedy_trap_rate<T: ProbeTarget + ?Sized>(target: &T, cfg: &ProbeConfig) -> Result<f64> {
    Ok(trap_rate_of(&observe(target, cfg)?))
}

/// Per-agent probe summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub length: usize,
    pub weight_source: WeightSource,
    pub n_permutations_evaluated: usize,
    pub accuracy: f64,
    pub non_inversion_proportion: f64,
    pub top_k_hit_rates: BTreeMap<usize, f64>,
    pub sign_convention: SignConvention,
    pub greedy_trap_rate: f64,
    /// Fraction of states whose greedy swap is wrong.
    pub error_rate: f64,
    /// Fraction of states where the chosen swap gets the same rank from the
    /// pre- and post-softmax rows (softmax keeps the order of the row but not
    /// of its differences).
    pub pre_post_rank_agreement: f64,
}

impl MetricsReport {
    pub fn top1(&self) -> f64 {
        self.top_k_hit_rates.get(&1).copied().unwrap_or(0.0)
    }
}

pub fn report_from(obs: &Observations, cfg: &ProbeConfig) -> Result<MetricsReport> {
    let (convention, rates) = top_k_of(obs, cfg.weight_source)?;
    let mut agree = 0;
    for ins in &obs.inspections {
        let pre = swap_rank(&ins.scores, ins.action, convention)?;
        let post = swap_rank(&ins.weights, ins.action, convention)?;
        agree += usize::from(pre == post);
    }
    let accuracy = accuracy_of(obs);
    Ok(MetricsReport {
        length: cfg.length,
        weight_source: cfg.weight_source,
        n_permutations_evaluated: obs.states.len(),
        accuracy,
        non_inversion_proportion: mean_non_inversion_of(obs, cfg.weight_source)?,
        top_k_hit_rates: rates
            .into_iter()
            .enumerate()
            .map(|(i, r)| (i + 1, r))
            .collect(),
        sign_convention: convention,
        greedy_trap_rate: trap_rate_of(obs),
        error_rate: 1.0 - accuracy,
        pre_post_rank_agreement: ratio(agree, obs.inspections.len()),
    })
}

/// Every probe in one pass over the evaluation set.
pub fn run_probes<T: ProbeTarget + ?Sized>(target: &T, cfg: &ProbeConfig) -> Result<MetricsReport> {
    report_from(&observe(target, cfg)?, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub row: usize,
    pub col: usize,
    pub weight: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolinPoint {
    pub token_id: u8,
    pub weight: f32,
}

/// Plot-ready attention tables.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceExport {
    /// Final-layer post-softmax matrix for the sorted input.
    pub heatmap: Vec<HeatmapCell>,
    /// For every evaluated state and position, the last-row weight at the
    /// column holding each token.
    pub violin: Vec<ViolinPoint>,
}

pub fn trace_data_from(
    obs: &Observations,
    heatmap: Option<Vec<f32>>,
    cfg: &ProbeConfig,
) -> TraceExport {
    let len = cfg.length;
    let heatmap = heatmap
        .map(|m| {
            m.iter()
                .enumerate()
                .map(|(k, &weight)| HeatmapCell {
                    row: k / len,
                    col: k % len,
                    weight,
                })
                .collect()
        })
        .unwrap_or_default();
    let violin = obs
        .states
        .iter()
        .zip(&obs.inspections)
        .flat_map(|(p, ins)| {
            let row = ins.row(cfg.weight_source);
            p.tokens()
                .iter()
                .zip(row)
                .map(|(&token_id, &weight)| ViolinPoint { token_id, weight })
                .collect::<Vec<_>>()
        })
        .collect();
    TraceExport { heatmap, violin }
}

pub fn extract_trace_data<T: ProbeTarget + ?Sized>(
    target: &T,
    cfg: &ProbeConfig,
) -> Result<TraceExport> {
    let obs = observe(target, cfg)?;
    let heatmap = target.attention_matrix(&Permutation::identity(cfg.length)?)?;
    Ok(trace_data_from(&obs, heatmap, cfg))
}
