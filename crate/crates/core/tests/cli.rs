use std::path::Path;
use std::process::{Command, Output};

use accelrl::algos::AlgoKind;
use accelrl::envs::{EnvSpec, LatencyDist};
use accelrl::telemetry::{read_metrics, BenchConfig, BenchRecord, ScoreRecord};
use accelrl::ExperimentConfig;

fn accelrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accelrl")).args(args).output().expect("binary runs")
}

fn smoke_config(dir: &Path, algo: AlgoKind) -> String {
    let mut cfg = ExperimentConfig::catch_default(algo);
    cfg.total_steps = 1_000;
    cfg.net.hidden_width = 16;
    cfg.telemetry.score_every_steps = 200;
    cfg.eval.every_steps = Some(500);
    cfg.eval.steps = 100;
    cfg.algo.dqn.min_history_batches = 2;
    let path = dir.join(format!("{}.toml", algo.name()));
    cfg.save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_smoke_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for algo in [AlgoKind::A2c, AlgoKind::Dqn] {
        let cfg = smoke_config(dir.path(), algo);
        let out = dir.path().join(format!("run-{}", algo.name()));
        let o = accelrl(&["train", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let scores: Vec<ScoreRecord> = read_metrics(&out.join("scores.csv")).unwrap();
        let per_cycle = match algo {
            AlgoKind::A2c => 16 * 5,
            _ => 16 * 4,
        };
        assert_eq!(scores.last().unwrap().step, 1_000u64.div_ceil(per_cycle) * per_cycle);
        let saved = ExperimentConfig::load(&out.join("config.toml")).unwrap();
        assert_eq!(saved.seed, 3);

        let r = accelrl(&["report", out.to_str().unwrap(), "--plot"]);
        assert!(r.status.success());
        assert!(String::from_utf8_lossy(&r.stdout).contains("measured intensity"));
        assert!(String::from_utf8_lossy(&r.stderr).is_empty(), "in-run and recomputed summaries agree");
        assert!(out.join("scores.svg").exists());
    }
}

#[test]
fn steps_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), AlgoKind::A2c);
    let out = dir.path().join("run");
    let o = accelrl(&["train", &cfg, "--out", out.to_str().unwrap(), "--steps", "160"]);
    assert!(o.status.success());
    let scores: Vec<ScoreRecord> = read_metrics(&out.join("scores.csv")).unwrap();
    assert_eq!(scores.last().unwrap().step, 160);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "version = 1\ntotal_steps = [").unwrap();
    let o = accelrl(&["train", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());

    let o = accelrl(&["train", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let mut cfg = ExperimentConfig::catch_default(AlgoKind::Ppo);
    cfg.algo.ppo.minibatches = 7;
    let inconsistent = dir.path().join("ppo.toml");
    cfg.save(&inconsistent).unwrap();
    let o = accelrl(&["train", inconsistent.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("minibatches"));

    assert_eq!(accelrl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(accelrl(&[]).status.code(), Some(1));
    assert_eq!(accelrl(&["report", dir.path().to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(accelrl(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), AlgoKind::A2c);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = accelrl(&["train", &cfg, "--out", blocker.join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_emits_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::catch_default(AlgoKind::A2c);
    cfg.env = EnvSpec::latency(LatencyDist::Constant { micros: 10.0 });
    cfg.bench = Some(BenchConfig {
        n_workers: vec![1, 2, 4],
        m_per_worker: vec![1, 2],
        groups: vec![1, 2],
        seeds: 1,
        horizon: 4,
        ..BenchConfig::default()
    });
    let out = dir.path().join("bench");
    cfg.out_dir = Some(out.clone());
    let path = dir.path().join("bench.toml");
    cfg.save(&path).unwrap();
    let o = accelrl(&["sample-bench", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<BenchRecord> = read_metrics(&out.join("bench.csv")).unwrap();
    // Three worker counts times (m=1: one group option, m=2: two).
    assert_eq!(rows.len(), 9);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 10);
}

#[test]
fn init_prints_a_valid_config() {
    for algo in ["a2c", "ppo", "dqn", "catdqn"] {
        let o = accelrl(&["init", algo]);
        assert!(o.status.success());
        let cfg = ExperimentConfig::from_toml(&String::from_utf8_lossy(&o.stdout)).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.algo.algo.name(), algo);
    }
}

#[test]
fn probe_and_secondary_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), AlgoKind::A2c);
    let o = accelrl(&["probe-cosine", &cfg, "--out", dir.path().join("cos").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("batch 80"));
    assert!(dir.path().join("cos/cosine.csv").exists());

    let o = accelrl(&["secondary", &cfg]);
    assert_eq!(o.status.code(), Some(1), "a2c config has no secondary section");

    let mut c = ExperimentConfig::catch_default(AlgoKind::Dqn);
    c.total_steps = 1_000;
    c.algo.dqn.min_history_batches = 2;
    c.eval.every_steps = Some(500);
    c.eval.steps = 100;
    c.secondary = Some(accelrl::telemetry::SecondaryConfig {
        batch_size: 64,
        shared_rng: false,
        equal_init: true,
    });
    let path = dir.path().join("sec.toml");
    c.save(&path).unwrap();
    let out = dir.path().join("sec");
    let o = accelrl(&["secondary", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["eval.csv", "secondary_eval.csv", "norms.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}
