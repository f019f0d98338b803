//! Greedy rollouts from every evaluation state.

use permsort_core::env::{step, EnvConfig};
use permsort_core::model::{act_greedy, ModelParams};
use permsort_core::probe::{evaluation_set, ProbeConfig};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub length: usize,
    pub episodes: usize,
    /// Episodes that reached the sorted state before truncation.
    pub solved_fraction: f64,
    /// Episodes sorted in exactly as many steps as the start had inversions.
    pub optimal_fraction: f64,
    pub mean_steps: f64,
    pub mean_return: f64,
}

pub fn evaluate(params: &ModelParams, max_steps: usize) -> Result<EvalReport> {
    let length = params.config.length;
    let cfg = EnvConfig {
        max_steps,
        ..EnvConfig::new(length, 0)
    };
    let starts = evaluation_set(&ProbeConfig::new(length))?;
    let (mut solved, mut optimal, mut steps_total, mut return_total) = (0usize, 0usize, 0u64, 0f64);
    for start in &starts {
        let mut state = start.clone();
        let mut steps = 0usize;
        let mut ret = 0f64;
        loop {
            let out = step(&state, act_greedy(params, &state)?, steps, &cfg)?;
            steps += 1;
            ret += f64::from(out.reward);
            state = out.next_state;
            if out.terminated {
                solved += 1;
                optimal += usize::from(steps == start.inversion_count());
                break;
            }
            if out.truncated {
                break;
            }
        }
        steps_total += steps as u64;
        return_total += ret;
    }
    let n = starts.len() as f64;
    Ok(EvalReport {
        length,
        episodes: starts.len(),
        solved_fraction: solved as f64 / n,
        optimal_fraction: optimal as f64 / n,
        mean_steps: steps_total as f64 / n,
        mean_return: return_total / n,
    })
}
