//! Run directories.
//!
//! ```text
//! <run>/manifest            TOML: status, model and PPO configuration
//! <run>/trainlog.jsonl      one TrainRecord per update
//! <run>/checkpoints/step_N  model snapshots
//! <run>/metrics.json        probe report of the final checkpoint
//! <run>/traces/*.csv        heatmap and violin tables
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use permsort_core::env::EnvConfig;
use permsort_core::model::{
    load_checkpoint, save_checkpoint, CheckpointManifest, ModelConfig, ModelParams,
};
use permsort_core::ppo::{train, PpoConfig, TrainObserver, TrainRecord};
use permsort_core::probe::{
    observe, report_from, trace_data_from, MetricsReport, ProbeConfig, ProbeTarget, TraceExport,
    WeightSource,
};
use permsort_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunnerError};

pub const MANIFEST: &str = "manifest";
pub const TRAINLOG: &str = "trainlog.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";
pub const METRICS: &str = "metrics.json";
pub const TRACES: &str = "traces";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Complete,
    Diverged,
    Failed,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub length: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub seed: u64,
    pub timesteps: u64,
}

impl RunSpec {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers,
            ..ModelConfig::new(self.length, self.embed_dim)
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig::new(self.length, self.seed)
    }

    /// `base` with this run's seed and budget.
    pub fn ppo_config(&self, base: &PpoConfig) -> PpoConfig {
        PpoConfig {
            total_timesteps: self.timesteps,
            seed: self.seed,
            ..base.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()
            .validate()
            .map_err(|e| RunnerError::Usage(e.to_string()))?;
        if self.timesteps == 0 {
            return Err(RunnerError::Usage("timesteps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_step: Option<u64>,
    /// Relative to the run directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_checkpoint: Option<String>,
    pub run: RunSpec,
    pub ppo: PpoConfig,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| RunnerError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| RunnerError::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| RunnerError::Data(e.to_string()))?;
        write_atomic(&run_dir.join(MANIFEST), text.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| RunnerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunnerError::io(path, e))
}

pub fn checkpoint_dir(run_dir: &Path, global_step: u64) -> PathBuf {
    run_dir
        .join(CHECKPOINTS)
        .join(format!("step_{global_step}"))
}

/// Whether `dir` looks like a run directory rather than a bare checkpoint.
pub fn is_run_dir(dir: &Path) -> bool {
    dir.join(CHECKPOINTS).is_dir() || dir.join(TRAINLOG).is_file()
}

struct RunWriter<'a> {
    run_dir: &'a Path,
    seed: u64,
    log: BufWriter<File>,
    last_checkpoint: Option<u64>,
}

impl TrainObserver for RunWriter<'_> {
    fn on_update(&mut self, record: &TrainRecord) -> permsort_core::Result<()> {
        let line = serde_json::to_string(record).map_err(|e| CoreError::Io(e.into()))?;
        writeln!(self.log, "{line}")?;
        self.log.flush()?;
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        global_step: u64,
        params: &ModelParams,
    ) -> permsort_core::Result<()> {
        save_checkpoint(
            &checkpoint_dir(self.run_dir, global_step),
            params,
            self.seed,
            global_step,
        )?;
        self.last_checkpoint = Some(global_step);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub global_step: u64,
    pub final_checkpoint: PathBuf,
}

/// Trains into a fresh run directory. On divergence the manifest records it
/// and earlier checkpoints stay in place.
pub fn train_run(run_dir: &Path, spec: &RunSpec, base: &PpoConfig) -> Result<TrainSummary> {
    spec.validate()?;
    let ppo = spec.ppo_config(base);
    ppo.validate()
        .map_err(|e| RunnerError::Usage(e.to_string()))?;
    if run_dir.join(MANIFEST).exists() {
        return Err(RunnerError::Data(format!(
            "{} already holds a run; choose a fresh directory",
            run_dir.display()
        )));
    }
    fs::create_dir_all(run_dir.join(CHECKPOINTS)).map_err(|e| RunnerError::io(run_dir, e))?;
    let mut manifest = RunManifest {
        status: RunStatus::Running,
        error: None,
        global_step: None,
        final_checkpoint: None,
        run: spec.clone(),
        ppo: ppo.clone(),
    };
    manifest.write(run_dir)?;

    let log_path = run_dir.join(TRAINLOG);
    let log = File::create(&log_path).map_err(|e| RunnerError::io(&log_path, e))?;
    let mut writer = RunWriter {
        run_dir,
        seed: spec.seed,
        log: BufWriter::new(log),
        last_checkpoint: None,
    };
    let outcome = train(&ppo, spec.model_config(), &spec.env_config(), &mut writer);
    let last = writer.last_checkpoint;
    drop(writer);
    match outcome {
        Ok(out) => {
            let rel = format!("{CHECKPOINTS}/step_{}", out.global_step);
            manifest.status = RunStatus::Complete;
            manifest.global_step = Some(out.global_step);
            manifest.final_checkpoint = Some(rel.clone());
            manifest.write(run_dir)?;
            Ok(TrainSummary {
                global_step: out.global_step,
                final_checkpoint: run_dir.join(rel),
            })
        }
        Err(e) => {
            manifest.status = match e {
                CoreError::Divergence(_) => RunStatus::Diverged,
                _ => RunStatus::Failed,
            };
            manifest.error = Some(e.to_string());
            manifest.global_step = last;
            manifest.final_checkpoint = last.map(|s| format!("{CHECKPOINTS}/step_{s}"));
            manifest.write(run_dir)?;
            Err(e.into())
        }
    }
}

/// Checkpoint to probe for `path`, which may be a run directory (its final,
/// or else newest, checkpoint) or a checkpoint directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !is_run_dir(path) {
        return Ok(path.to_path_buf());
    }
    if let Ok(m) = RunManifest::read(path) {
        if let Some(rel) = m.final_checkpoint {
            return Ok(path.join(rel));
        }
    }
    newest_checkpoint(path)?
        .ok_or_else(|| RunnerError::Data(format!("{} holds no checkpoint", path.display())))
}

pub fn newest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join(CHECKPOINTS);
    let entries = fs::read_dir(&dir).map_err(|e| RunnerError::io(&dir, e))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| RunnerError::io(&dir, e))?;
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|s| s.parse().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Where probe output for `checkpoint` goes: the enclosing run directory if
/// there is one, else the checkpoint directory itself.
pub fn probe_output_dir(checkpoint: &Path) -> PathBuf {
    match checkpoint.parent() {
        Some(parent) if parent.file_name().is_some_and(|n| n == CHECKPOINTS) => {
            parent.parent().unwrap_or(parent).to_path_buf()
        }
        _ => checkpoint.to_path_buf(),
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutput {
    pub report: MetricsReport,
    pub traces: TraceExport,
    pub checkpoint: CheckpointManifest,
}

pub fn probe_params(
    params: &ModelParams,
    source: WeightSource,
) -> Result<(MetricsReport, TraceExport)> {
    let cfg = ProbeConfig {
        weight_source: source,
        ..ProbeConfig::new(params.config.length)
    };
    let obs = observe(params, &cfg)?;
    let report = report_from(&obs, &cfg)?;
    let identity = permsort_core::env::Permutation::identity(cfg.length)?;
    let traces = trace_data_from(&obs, params.attention_matrix(&identity)?, &cfg);
    Ok((report, traces))
}

pub fn probe_checkpoint(checkpoint: &Path, source: WeightSource) -> Result<ProbeOutput> {
    let (params, manifest) = load_checkpoint(checkpoint)?;
    let (report, traces) = probe_params(&params, source)?;
    Ok(ProbeOutput {
        report,
        traces,
        checkpoint: manifest,
    })
}

/// Writes `metrics.json` and `traces/{heatmap,violin}.csv` under `out`.
pub fn write_probe_output(out: &Path, report: &MetricsReport, traces: &TraceExport) -> Result<()> {
    let traces_dir = out.join(TRACES);
    fs::create_dir_all(&traces_dir).map_err(|e| RunnerError::io(&traces_dir, e))?;
    let json =
        serde_json::to_string_pretty(report).map_err(|e| RunnerError::Data(e.to_string()))?;
    write_atomic(&out.join(METRICS), format!("{json}\n").as_bytes())?;
    write_csv(&traces_dir.join("heatmap.csv"), &traces.heatmap)?;
    write_csv(&traces_dir.join("violin.csv"), &traces.violin)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| RunnerError::Data(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| RunnerError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| RunnerError::io(path, e))
}

pub fn read_metrics(run_dir: &Path) -> Result<MetricsReport> {
    let path = run_dir.join(METRICS);
    let text = fs::read_to_string(&path).map_err(|e| RunnerError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| RunnerError::Data(format!("{}: {e}", path.display())))
}
