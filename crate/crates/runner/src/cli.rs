use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use permsort_core::env::DEFAULT_MAX_STEPS;
use permsort_core::model::load_checkpoint;
use permsort_core::ppo::PpoConfig;
use permsort_core::probe::{MetricsReport, SignConvention, WeightSource};

use crate::error::{Result, RunnerError};
use crate::eval::evaluate;
use crate::report::{aggregate, discover, write_report, DEFAULT_HIGH_ACCURACY};
use crate::rundir::{
    probe_checkpoint, probe_output_dir, resolve_checkpoint, train_run, write_probe_output, RunSpec,
};
use crate::sweep::{run_sweep, CellStatus, SweepSpec};

#[derive(Debug, Parser)]
#[command(
    name = "permsort",
    version,
    about = "Train and probe attention policies that sort permutations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent into a fresh run directory.
    Train(TrainArgs),
    /// Greedy rollouts from every unsorted start state.
    Eval(EvalArgs),
    /// Probe a checkpoint; writes metrics.json and traces/*.csv.
    Probe(ProbeArgs),
    /// Train and probe every cell of a sweep file.
    Sweep(SweepArgs),
    /// Aggregate probed runs into curves, a scatter and a fit.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(3..=10))]
    pub length: u8,
    #[arg(long, value_parser = clap::value_parser!(u16).range(2..=128))]
    pub embed_dim: u16,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub timesteps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub layers: u8,
    /// TOML file of PPO hyperparameter overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    pub max_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Post,
    Pre,
}

impl From<Source> for WeightSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Post => WeightSource::PostSoftmax,
            Source::Pre => WeightSource::PreSoftmax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Checkpoint directory or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Source::Post)]
    pub weight_source: Source,
    /// Format of the report printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Output directory; defaults to the enclosing run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep file (TOML); defaults apply when omitted.
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub runs: PathBuf,
    /// Accuracy at or above which an agent counts as converged.
    #[arg(long, default_value_t = DEFAULT_HIGH_ACCURACY)]
    pub threshold: f64,
    /// Output directory; defaults to the runs directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_text(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let base = match &a.config {
                Some(path) => toml::from_str::<PpoConfig>(&read_text(path)?)
                    .map_err(|e| RunnerError::Usage(format!("{}: {e}", path.display())))?,
                None => PpoConfig::default(),
            };
            let spec = RunSpec {
                length: a.length.into(),
                embed_dim: a.embed_dim.into(),
                layers: a.layers.into(),
                seed: a.seed,
                timesteps: a.timesteps,
            };
            let summary = train_run(&a.out, &spec, &base)?;
            writeln!(
                stdout,
                "trained {} steps; final checkpoint {}",
                summary.global_step,
                summary.final_checkpoint.display()
            )
            .map_err(|e| RunnerError::io("stdout", e))?;
        }
        Command::Eval(a) => {
            let (params, _) = load_checkpoint(&resolve_checkpoint(&a.checkpoint)?)?;
            if a.max_steps == 0 {
                return Err(RunnerError::Usage("--max-steps must be positive".into()));
            }
            let report = evaluate(&params, a.max_steps)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| RunnerError::Data(e.to_string()))?;
            writeln!(stdout, "{json}").map_err(|e| RunnerError::io("stdout", e))?;
        }
        Command::Probe(a) => {
            let checkpoint = resolve_checkpoint(&a.checkpoint)?;
            let out = probe_checkpoint(&checkpoint, a.weight_source.into())?;
            let dir = a.out.unwrap_or_else(|| probe_output_dir(&checkpoint));
            write_probe_output(&dir, &out.report, &out.traces)?;
            let text = match a.format {
                Format::Json => serde_json::to_string_pretty(&out.report)
                    .map_err(|e| RunnerError::Data(e.to_string()))?,
                Format::Text => render_metrics(&out.report),
            };
            writeln!(stdout, "{text}").map_err(|e| RunnerError::io("stdout", e))?;
        }
        Command::Sweep(a) => {
            let spec = match &a.spec {
                Some(path) => SweepSpec::from_toml(&read_text(path)?)?,
                None => SweepSpec::default(),
            }
            .with_env_overrides()?;
            let outcomes = run_sweep(&spec)?;
            let mut failed = 0;
            for o in &outcomes {
                let status = match &o.status {
                    CellStatus::Trained => "trained".to_string(),
                    CellStatus::Skipped => "skipped (complete)".to_string(),
                    CellStatus::Diverged(e) => format!("diverged: {e}"),
                    CellStatus::Failed(e) => {
                        failed += 1;
                        format!("failed: {e}")
                    }
                };
                writeln!(stdout, "{}: {status}", o.dir.display())
                    .map_err(|e| RunnerError::io("stdout", e))?;
            }
            if failed > 0 {
                return Err(RunnerError::Data(format!(
                    "{failed} of {} cells failed",
                    outcomes.len()
                )));
            }
        }
        Command::Report(a) => {
            if !(0.0..=1.0).contains(&a.threshold) {
                return Err(RunnerError::Usage("--threshold must lie in [0, 1]".into()));
            }
            let report = aggregate(&discover(&a.runs)?, a.threshold)?;
            let out = a.out.unwrap_or_else(|| a.runs.clone());
            write_report(&out, &report)?;
            writeln!(
                stdout,
                "{} runs in {} cells; report written to {}",
                report.runs,
                report.cells.len(),
                out.display()
            )
            .map_err(|e| RunnerError::io("stdout", e))?;
        }
    }
    Ok(())
}

pub fn render_metrics(m: &MetricsReport) -> String {
    let mut s = format!(
        "states evaluated      {}\naccuracy              {:.4}\nnon-inversion         {:.4}\nsign convention       {}\n",
        m.n_permutations_evaluated,
        m.accuracy,
        m.non_inversion_proportion,
        match m.sign_convention {
            SignConvention::MostNegative => "most-negative",
            SignConvention::MostPositive => "most-positive",
        }
    );
    for (k, r) in &m.top_k_hit_rates {
        s.push_str(&format!("{:<22}{r:.4}\n", format!("top-{k}")));
    }
    s.push_str(&format!(
        "greedy trap rate      {:.4}\nerror rate            {:.4}\npre/post rank agree   {:.4}",
        m.greedy_trap_rate, m.error_rate, m.pre_post_rank_agreement
    ));
    s
}
