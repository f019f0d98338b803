//! Grid sweeps over (length, embedding dimension, seed).

use std::fs;
use std::path::{Path, PathBuf};

use permsort_core::ppo::PpoConfig;
use permsort_core::probe::WeightSource;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunnerError};
use crate::rundir::{
    probe_checkpoint, resolve_checkpoint, train_run, write_probe_output, RunManifest, RunSpec,
    RunStatus, MANIFEST, METRICS,
};

pub const OUT_ENV: &str = "PERMSORT_OUT";
pub const WORKERS_ENV: &str = "PERMSORT_WORKERS";

/// Sweep file schema (TOML). Every key is optional.
///
/// ```toml
/// dims = [2, 4, 8, 16, 32]
/// lengths = [4, 5]
/// seeds = 5            # seeds 0..5 in every cell
/// timesteps = 300000
/// layers = 1
/// workers = 1
/// out = "runs"
///
/// [ppo]                # PPO overrides, same keys as the run manifest
/// learning_rate = 2.5e-4
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub dims: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seeds: u64,
    pub timesteps: u64,
    pub layers: usize,
    pub workers: usize,
    pub out: PathBuf,
    pub ppo: PpoConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            dims: vec![2, 4, 8, 16, 32],
            lengths: vec![4, 5],
            seeds: 5,
            timesteps: 300_000,
            layers: 1,
            workers: 1,
            out: PathBuf::from("runs"),
            ppo: PpoConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RunnerError::Usage(format!("sweep file: {e}")))
    }

    /// Applies the output-path and worker-count environment overrides.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(out) = std::env::var(OUT_ENV) {
            self.out = PathBuf::from(out);
        }
        if let Ok(w) = std::env::var(WORKERS_ENV) {
            self.workers = w
                .parse()
                .map_err(|_| RunnerError::Usage(format!("{WORKERS_ENV}={w:?} is not a count")))?;
        }
        Ok(self)
    }

    pub fn cells(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &length in &self.lengths {
            for &embed_dim in &self.dims {
                for seed in 0..self.seeds {
                    out.push(RunSpec {
                        length,
                        embed_dim,
                        layers: self.layers,
                        seed,
                        timesteps: self.timesteps,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(RunnerError::Usage("workers must be positive".into()));
        }
        if self.cells().is_empty() {
            return Err(RunnerError::Usage("sweep has no cells".into()));
        }
        for cell in self.cells() {
            cell.validate()?;
        }
        let mut keys: Vec<_> = self.cells().iter().map(cell_name).collect();
        keys.sort();
        keys.dedup();
        if keys.len() != self.cells().len() {
            return Err(RunnerError::Usage(
                "sweep lists a dimension or length twice".into(),
            ));
        }
        self.ppo
            .validate()
            .map_err(|e| RunnerError::Usage(format!("sweep [ppo]: {e}")))
    }
}

pub fn cell_name(spec: &RunSpec) -> String {
    format!("l{}-d{}-s{}", spec.length, spec.embed_dim, spec.seed)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Trained,
    /// Already complete on disk.
    Skipped,
    Diverged(String),
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub run: RunSpec,
    pub dir: PathBuf,
    pub status: CellStatus,
}

/// Runs every cell not already complete, at most `workers` at a time.
/// A cell failure is recorded and does not stop the others.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<CellOutcome>> {
    spec.validate()?;
    fs::create_dir_all(&spec.out).map_err(|e| RunnerError::io(&spec.out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| RunnerError::Usage(e.to_string()))?;
    let cells = spec.cells();
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let dir = spec.out.join(cell_name(cell));
                let status = match run_cell(&dir, cell, &spec.ppo) {
                    Ok(s) => s,
                    Err(e @ RunnerError::Divergence(_)) => CellStatus::Diverged(e.to_string()),
                    Err(RunnerError::Core(e @ permsort_core::Error::Divergence(_))) => {
                        CellStatus::Diverged(e.to_string())
                    }
                    Err(e) => CellStatus::Failed(e.to_string()),
                };
                CellOutcome {
                    run: cell.clone(),
                    dir,
                    status,
                }
            })
            .collect()
    }))
}

fn run_cell(dir: &Path, cell: &RunSpec, ppo: &PpoConfig) -> Result<CellStatus> {
    if dir.join(MANIFEST).exists() {
        let manifest = RunManifest::read(dir)?;
        match manifest.status {
            RunStatus::Complete if manifest.run == *cell => {
                if dir.join(METRICS).exists() {
                    return Ok(CellStatus::Skipped);
                }
                probe_into(dir)?;
                return Ok(CellStatus::Trained);
            }
            RunStatus::Diverged if manifest.run == *cell => {
                return Ok(CellStatus::Diverged(manifest.error.unwrap_or_default()));
            }
            // interrupted, failed, or a different configuration
            _ => fs::remove_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?,
        }
    }
    train_run(dir, cell, ppo)?;
    probe_into(dir)?;
    Ok(CellStatus::Trained)
}

fn probe_into(dir: &Path) -> Result<()> {
    let out = probe_checkpoint(&resolve_checkpoint(dir)?, WeightSource::PostSoftmax)?;
    write_probe_output(dir, &out.report, &out.traces)
}
