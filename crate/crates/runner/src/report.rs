//! Aggregation of probed runs into per-cell statistics and a cross-agent fit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use permsort_core::probe::MetricsReport;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunnerError};
use crate::rundir::{read_metrics, write_csv, RunManifest, RunSpec, RunStatus, MANIFEST, METRICS};

/// Accuracy at or above which an agent counts as converged.
pub const DEFAULT_HIGH_ACCURACY: f64 = 0.99;

const Z95: f64 = 1.96;

pub mod stats {
    use serde::{Deserialize, Serialize};

    pub fn mean(xs: &[f64]) -> Option<f64> {
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Sample standard deviation (n - 1 denominator).
    pub fn sample_std(xs: &[f64]) -> Option<f64> {
        if xs.len() < 2 {
            return None;
        }
        let m = mean(xs)?;
        let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
        Some((ss / (xs.len() - 1) as f64).sqrt())
    }

    /// Normal-approximation 95% half-width, `1.96 * s / sqrt(n)`.
    pub fn ci95_half_width(xs: &[f64]) -> Option<f64> {
        Some(super::Z95 * sample_std(xs)? / (xs.len() as f64).sqrt())
    }

    #[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
    pub struct LinearFit {
        pub slope: f64,
        pub intercept: f64,
        /// `1 - SS_res / SS_tot`; 1 when every `y` is equal.
        pub r_squared: f64,
        pub n: usize,
    }

    /// Ordinary least squares of `ys` on `xs`. `None` with fewer than two
    /// points or constant `xs`.
    pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return None;
        }
        let (mx, my) = (mean(xs)?, mean(ys)?);
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let ss_res: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
            .sum();
        let r_squared = if ss_tot == 0.0 {
            1.0
        } else {
            (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
        };
        Some(LinearFit {
            slope,
            intercept,
            r_squared,
            n,
        })
    }
}

pub use stats::LinearFit;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    /// Absent with fewer than two values.
    pub ci_half_width: Option<f64>,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            n: xs.len(),
            mean: stats::mean(xs),
            ci_half_width: stats::ci95_half_width(xs),
        }
    }

    pub fn ci(&self) -> Option<(f64, f64)> {
        Some((
            self.mean? - self.ci_half_width?,
            self.mean? + self.ci_half_width?,
        ))
    }
}

/// Statistics of one (length, embedding dimension, layers) cell. Accuracy
/// covers every run; the probe metrics cover converged runs only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub length: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub runs: usize,
    pub converged: usize,
    pub accuracy: Summary,
    pub non_inversion_proportion: Summary,
    pub top1: Summary,
    pub top2: Summary,
    pub greedy_trap_rate: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub length: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub non_inversion_proportion: f64,
    pub top1: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub high_accuracy_threshold: f64,
    pub runs: usize,
    pub cells: Vec<CellReport>,
    pub scatter: Vec<ScatterPoint>,
    /// Top-1 rate on non-inversion proportion over converged agents.
    pub fit: Option<LinearFit>,
}

/// A completed and probed run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub run: RunSpec,
    pub metrics: MetricsReport,
}

/// Every complete run with a `metrics.json` at or below `root`.
pub fn discover(root: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST).is_file() && dir.join(METRICS).is_file() {
            if let Ok(manifest) = RunManifest::read(&dir) {
                if manifest.status == RunStatus::Complete {
                    out.push(RunRecord {
                        metrics: read_metrics(&dir)?,
                        run: manifest.run,
                        dir,
                    });
                    continue;
                }
            }
        }
        let entries = fs::read_dir(&dir).map_err(|e| RunnerError::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| RunnerError::io(&dir, e))?;
            if entry
                .file_type()
                .map_err(|e| RunnerError::io(entry.path(), e))?
                .is_dir()
            {
                stack.push(entry.path());
            }
        }
    }
    Ok(out)
}

/// Folds runs into the aggregate. The result does not depend on the order
/// of `runs`.
pub fn aggregate(runs: &[RunRecord], threshold: f64) -> Result<AggregateReport> {
    if runs.is_empty() {
        return Err(RunnerError::Data(
            "nothing to report: no completed, probed runs found".into(),
        ));
    }
    let mut sorted: Vec<&RunRecord> = runs.iter().collect();
    sorted.sort_by(|a, b| {
        (
            a.run.length,
            a.run.embed_dim,
            a.run.layers,
            a.run.seed,
            &a.dir,
        )
            .cmp(&(
                b.run.length,
                b.run.embed_dim,
                b.run.layers,
                b.run.seed,
                &b.dir,
            ))
    });

    let scatter: Vec<ScatterPoint> = sorted
        .iter()
        .map(|r| ScatterPoint {
            length: r.run.length,
            embed_dim: r.run.embed_dim,
            layers: r.run.layers,
            seed: r.run.seed,
            accuracy: r.metrics.accuracy,
            non_inversion_proportion: r.metrics.non_inversion_proportion,
            top1: r.metrics.top1(),
            converged: r.metrics.accuracy >= threshold,
        })
        .collect();

    let mut groups: BTreeMap<(usize, usize, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in &sorted {
        groups
            .entry((r.run.length, r.run.embed_dim, r.run.layers))
            .or_default()
            .push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((length, embed_dim, layers), rs)| {
            let converged: Vec<&MetricsReport> = rs
                .iter()
                .map(|r| &r.metrics)
                .filter(|m| m.accuracy >= threshold)
                .collect();
            let over = |f: fn(&MetricsReport) -> f64| {
                Summary::of(&converged.iter().map(|m| f(m)).collect::<Vec<_>>())
            };
            CellReport {
                length,
                embed_dim,
                layers,
                runs: rs.len(),
                converged: converged.len(),
                accuracy: Summary::of(&rs.iter().map(|r| r.metrics.accuracy).collect::<Vec<_>>()),
                non_inversion_proportion: over(|m| m.non_inversion_proportion),
                top1: over(|m| m.top1()),
                top2: over(|m| m.top_k_hit_rates.get(&2).copied().unwrap_or(1.0)),
                greedy_trap_rate: over(|m| m.greedy_trap_rate),
            }
        })
        .collect();

    let (xs, ys): (Vec<f64>, Vec<f64>) = scatter
        .iter()
        .filter(|p| p.converged)
        .map(|p| (p.non_inversion_proportion, p.top1))
        .unzip();
    Ok(AggregateReport {
        high_accuracy_threshold: threshold,
        runs: sorted.len(),
        cells,
        scatter,
        fit: stats::linear_fit(&xs, &ys),
    })
}

#[derive(Serialize)]
struct CurveRow {
    length: usize,
    embed_dim: usize,
    layers: usize,
    metric: &'static str,
    n: usize,
    mean: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
}

/// Writes `report.json`, `curves.csv` (one row per cell and metric) and
/// `scatter.csv` into `out`.
pub fn write_report(out: &Path, report: &AggregateReport) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| RunnerError::io(out, e))?;
    let json =
        serde_json::to_string_pretty(report).map_err(|e| RunnerError::Data(e.to_string()))?;
    let path = out.join("report.json");
    fs::write(&path, format!("{json}\n")).map_err(|e| RunnerError::io(&path, e))?;

    let mut rows = Vec::new();
    for c in &report.cells {
        for (metric, s) in [
            ("accuracy", c.accuracy),
            ("non_inversion_proportion", c.non_inversion_proportion),
            ("top1", c.top1),
            ("top2", c.top2),
            ("greedy_trap_rate", c.greedy_trap_rate),
        ] {
            let ci = s.ci();
            rows.push(CurveRow {
                length: c.length,
                embed_dim: c.embed_dim,
                layers: c.layers,
                metric,
                n: s.n,
                mean: s.mean,
                ci_low: ci.map(|c| c.0),
                ci_high: ci.map(|c| c.1),
            });
        }
    }
    write_csv(&out.join("curves.csv"), &rows)?;
    write_csv(&out.join("scatter.csv"), &report.scatter)
}
