use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use permsort_core::diffcore::Tensor;
use permsort_core::env::Permutation;
use permsort_core::model::{act_greedy, save_checkpoint, ModelConfig, ModelParams};
use permsort_core::probe::MetricsReport;
use permsort_runner::report::{aggregate, discover};
use permsort_runner::rundir::{RunManifest, RunStatus};
use permsort_runner::sweep::{run_sweep, CellStatus, SweepSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn permsort(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permsort"))
        .args(args)
        .env_remove("PERMSORT_OUT")
        .env_remove("PERMSORT_WORKERS")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Length 3, d = 4: the last query attends to the position holding token 3,
/// whose position embedding selects the one correct swap.
fn oracle_params() -> ModelParams {
    let cfg = ModelConfig::new(3, 4);
    let mut p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let m = |rows: usize, cols: usize, data: Vec<f32>| Tensor::matrix(rows, cols, data).unwrap();
    p.token_embed = m(3, 4, vec![1., 0., 0., 0., 2., 0., 0., 0., 3., 0., 0., 0.]);
    p.position_embed = m(3, 4, vec![0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]);
    let mut query = vec![0.0; 16];
    query[3 * 4] = 40.0;
    let mut key = vec![0.0; 16];
    key[0] = 1.0;
    let identity: Vec<f32> = (0..16)
        .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
        .collect();
    p.layers[0].query = m(4, 4, query);
    p.layers[0].key = m(4, 4, key);
    p.layers[0].value = m(4, 4, identity);
    p.actor_weight = m(4, 2, vec![0., 0., 1., 0., 0., 1., 1., 0.]);
    p.actor_bias = Tensor::zeros(&[2]);
    p.critic_weight = Tensor::zeros(&[4, 1]);
    p
}

#[test]
fn probing_the_hand_built_oracle_gives_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("oracle");
    save_checkpoint(&ckpt, &oracle_params(), 0, 0).unwrap();
    let out = permsort(&["probe", "--checkpoint", path(&ckpt), "--format", "json"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.greedy_trap_rate, 0.0);
    assert_eq!(report.n_permutations_evaluated, 5);

    let heatmap = fs::read_to_string(ckpt.join("traces/heatmap.csv")).unwrap();
    assert!(heatmap.starts_with("row,col,weight\n"));
    let violin = fs::read_to_string(ckpt.join("traces/violin.csv")).unwrap();
    assert!(violin.starts_with("token_id,weight\n"));
    assert_eq!(violin.lines().count(), 1 + 5 * 3);
}

#[test]
fn metrics_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let params =
        ModelParams::init(ModelConfig::new(4, 8), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &params, 9, 0).unwrap();
    let out = permsort(&["probe", "--checkpoint", path(&ckpt), "--format", "json"]);
    assert!(out.status.success());
    let report: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    let again: MetricsReport =
        serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(report, again);
    let on_disk: MetricsReport =
        serde_json::from_str(&fs::read_to_string(ckpt.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report, on_disk);
}

#[test]
fn fresh_model_scores_near_its_enumerated_baseline() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let params = ModelParams::init(
            ModelConfig::new(4, 16),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let states: Vec<Permutation> = Permutation::all_unsorted(4).unwrap().collect();
        let correct = states
            .iter()
            .filter(|p| p.is_correct_swap(act_greedy(&params, p).unwrap()))
            .count();
        let baseline = correct as f64 / states.len() as f64;

        let ckpt = dir.path().join(format!("fresh{seed}"));
        save_checkpoint(&ckpt, &params, seed, 0).unwrap();
        let out = permsort(&["probe", "--checkpoint", path(&ckpt), "--format", "json"]);
        let report: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
        assert!(
            (report.accuracy - baseline).abs() <= 0.1,
            "{} vs {baseline}",
            report.accuracy
        );
    }
}

#[test]
fn usage_data_and_divergence_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = permsort(&[
        "train",
        "--length",
        "2",
        "--embed-dim",
        "8",
        "--timesteps",
        "10",
        "--out",
        "x",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(permsort(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(permsort(&["--help"]).status.code(), Some(0));

    let ckpt = dir.path().join("ckpt");
    let params =
        ModelParams::init(ModelConfig::new(3, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    save_checkpoint(&ckpt, &params, 0, 0).unwrap();
    let manifest = ckpt.join("manifest");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(
        &manifest,
        text.replace("format_version = 1", "format_version = 7"),
    )
    .unwrap();
    assert_eq!(
        permsort(&["probe", "--checkpoint", path(&ckpt)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        permsort(&["report", path(dir.path())]).status.code(),
        Some(2)
    );

    let config = dir.path().join("hot.toml");
    fs::write(&config, "learning_rate = 1e30\n").unwrap();
    let run = dir.path().join("hot");
    let out = permsort(&[
        "train",
        "--length",
        "4",
        "--embed-dim",
        "8",
        "--timesteps",
        "4096",
        "--out",
        path(&run),
        "--config",
        path(&config),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(RunManifest::read(&run).unwrap().status, RunStatus::Diverged);
}

#[test]
fn train_probe_and_report_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("runs/a");
    let out = permsort(&[
        "train",
        "--length",
        "4",
        "--embed-dim",
        "8",
        "--timesteps",
        "3000",
        "--seed",
        "2",
        "--out",
        path(&run),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run.join("checkpoints/step_3072/params.bin").is_file());
    assert_eq!(
        fs::read_to_string(run.join("trainlog.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    // refuses to overwrite a run
    assert_eq!(
        permsort(&[
            "train",
            "--length",
            "4",
            "--embed-dim",
            "8",
            "--timesteps",
            "3000",
            "--out",
            path(&run)
        ])
        .status
        .code(),
        Some(2)
    );

    assert!(permsort(&["probe", "--checkpoint", path(&run)])
        .status
        .success());
    assert!(run.join("metrics.json").is_file());
    assert!(permsort(&["eval", "--checkpoint", path(&run)])
        .status
        .success());

    let runs = dir.path().join("runs");
    assert!(permsort(&["report", path(&runs)]).status.success());
    let curves = fs::read_to_string(runs.join("curves.csv")).unwrap();
    assert!(curves.starts_with("length,embed_dim,layers,metric,n,mean,ci_low,ci_high\n"));
    // one seed: no interval
    assert!(curves
        .lines()
        .any(|l| l.starts_with("4,8,1,accuracy,1,") && l.ends_with(",,")));
}

fn tiny_sweep(out: &Path, workers: usize) -> SweepSpec {
    SweepSpec {
        dims: vec![2, 4, 8],
        lengths: vec![3],
        seeds: 2,
        timesteps: 1024,
        workers,
        out: out.to_path_buf(),
        ..SweepSpec::default()
    }
}

#[test]
fn sweep_accounting_resume_and_worker_independence() {
    let dir = tempfile::tempdir().unwrap();
    let one = tiny_sweep(&dir.path().join("one"), 1);
    let outcomes = run_sweep(&one).unwrap();
    assert_eq!(outcomes.len(), 6);
    assert!(outcomes.iter().all(|o| o.status == CellStatus::Trained));
    let runs = fs::read_dir(&one.out).unwrap().count();
    assert_eq!(runs, 6);

    let probe = one.out.join("l3-d4-s1/metrics.json");
    let before = fs::metadata(&probe).unwrap().modified().unwrap();
    let again = run_sweep(&one).unwrap();
    assert!(again.iter().all(|o| o.status == CellStatus::Skipped));
    assert_eq!(fs::metadata(&probe).unwrap().modified().unwrap(), before);

    // an interrupted cell is retrained, the rest are kept
    let cell = one.out.join("l3-d2-s0");
    let mut m = RunManifest::read(&cell).unwrap();
    m.status = RunStatus::Running;
    m.write(&cell).unwrap();
    fs::remove_file(cell.join("metrics.json")).unwrap();
    let resumed = run_sweep(&one).unwrap();
    let trained: Vec<_> = resumed
        .iter()
        .filter(|o| o.status == CellStatus::Trained)
        .collect();
    assert_eq!(trained.len(), 1);
    assert_eq!(trained[0].dir, cell);

    let two = tiny_sweep(&dir.path().join("two"), 2);
    run_sweep(&two).unwrap();
    for o in &outcomes {
        let name = o.dir.file_name().unwrap();
        for file in [
            "metrics.json",
            "checkpoints/step_1024/params.bin",
            "trainlog.jsonl",
        ] {
            assert_eq!(
                fs::read(one.out.join(name).join(file)).unwrap(),
                fs::read(two.out.join(name).join(file)).unwrap(),
                "{name:?}/{file}"
            );
        }
    }

    let mut records = discover(&one.out).unwrap();
    assert_eq!(records.len(), 6);
    let a = aggregate(&records, 0.99).unwrap();
    records.reverse();
    let b = aggregate(&records, 0.99).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.cells.len(), 3);
    assert!(a
        .cells
        .iter()
        .all(|c| c.runs == 2 && c.accuracy.ci_half_width.is_some()));
}

#[test]
fn sweep_file_schema() {
    let spec =
        SweepSpec::from_toml("dims = [4]\nseeds = 1\n[ppo]\nlearning_rate = 1e-3\n").unwrap();
    assert_eq!(spec.dims, vec![4]);
    assert_eq!(spec.lengths, vec![4, 5]);
    assert_eq!(spec.ppo.learning_rate, 1e-3);
    assert!(SweepSpec::from_toml("dimz = [4]").is_err());
}
