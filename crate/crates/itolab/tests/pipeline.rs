//! End-to-end CLI pipeline checks: every stage through the real binary on a
//! small double-well run, exit codes, manifests, and bytewise determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use itolab::cli::config::{preset, RunConfig};
use itolab::cli::manifest::{config_hash, RunManifest};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_itolab")
}

fn run_stage(stage: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(bin())
        .arg(stage)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary spawns")
}

fn expect_ok(stage: &str, config: &Path, out: &Path, extra: &[&str]) {
    let o = run_stage(stage, config, out, extra);
    assert!(
        o.status.success(),
        "{stage} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Double-well run shrunk until the whole pipeline takes seconds. The model
/// is undertrained; these tests exercise plumbing, not accuracy.
fn tiny_config() -> RunConfig {
    let mut cfg = preset("double_well").unwrap();
    cfg.system.temperatures = vec![1.0];
    cfg.system.n_trajectories = 2;
    cfg.system.n_steps = 4_000;
    cfg.system.save_stride = 5;
    cfg.system.burn_in_frames = 50;
    cfg.train.total_steps = 150;
    cfg.train.batch_size = 16;
    cfg.train.delta_t_max = 4;
    cfg.sample.n_ode_steps = 8;
    cfg.sample.delta_t = 0.05;
    cfg.sample.temperature = 1.0;
    cfg.sample.ensemble_size = 6;
    cfg.sample.n_steps = 30;
    cfg.sample.tail_window = 5;
    cfg.analyze.tica_lag = 5;
    cfg.analyze.n_tica_components = 1;
    cfg.analyze.fes_bins = vec![12];
    cfg.analyze.n_clusters = 8;
    cfg.analyze.msm_lag = 2;
    cfg.analyze.pcca_min_gap = 0.0;
    cfg.analyze.n_posterior_samples = 20;
    cfg.sweep.temperatures = vec![0.9, 1.1];
    cfg.seed = 99;
    cfg.validate().unwrap();
    cfg
}

fn write_config(cfg: &RunConfig, dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn read_manifest(out: &Path, stage: &str) -> RunManifest {
    let path = out.join("manifests").join(format!("{stage}.json"));
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn run_pipeline(cfg_path: &Path, out: &Path) {
    for stage in ["simulate", "train", "sample", "rollout", "analyze", "sweep"] {
        expect_ok(stage, cfg_path, out, &[]);
    }
}

#[test]
fn full_pipeline_produces_all_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cfg_path = write_config(&cfg, tmp.path());

    let out_a = tmp.path().join("a");
    run_pipeline(&cfg_path, &out_a);

    for rel in [
        "trajectories/double_well_t00_r000.traj",
        "trajectories/double_well_t00_r001.traj",
        "checkpoints/final.ckpt",
        "checkpoints/trace.csv",
        "samples/transitions.csv",
        "rollouts/member_0000.traj",
        "rollouts/ensemble.csv",
        "analysis/tica_reference.csv",
        "analysis/tica_model.csv",
        "analysis/fes_reference.csv",
        "analysis/fes_model.csv",
        "analysis/metrics.csv",
        "analysis/rates.csv",
        "sweep/rates.csv",
        "sweep/arrhenius.csv",
        "manifests/simulate.json",
        "manifests/train.json",
        "manifests/sample.json",
        "manifests/rollout.json",
        "manifests/analyze.json",
        "manifests/sweep.json",
    ] {
        assert!(out_a.join(rel).exists(), "missing {rel}");
    }

    let man = read_manifest(&out_a, "simulate");
    assert_eq!(man.root_seed, cfg.seed);
    assert_eq!(man.config_hash, config_hash(&cfg));
    assert_eq!(man.tool_version, env!("CARGO_PKG_VERSION"));
    assert!(man.seeds.len() >= 2, "per-trajectory seeds recorded");
    assert!(!man.timings.is_empty());

    // Identical config and seed: every derived artifact must be bytewise
    // identical on a second run, manifest timings aside.
    let out_b = tmp.path().join("b");
    run_pipeline(&cfg_path, &out_b);
    for rel in [
        "trajectories/double_well_t00_r000.traj",
        "checkpoints/final.ckpt",
        "samples/transitions.csv",
        "rollouts/member_0000.traj",
        "rollouts/ensemble.csv",
        "analysis/tica_reference.csv",
        "analysis/tica_model.csv",
        "analysis/fes_reference.csv",
        "analysis/fes_model.csv",
        "analysis/metrics.csv",
        "analysis/rates.csv",
        "sweep/rates.csv",
        "sweep/arrhenius.csv",
    ] {
        let a = std::fs::read(out_a.join(rel)).unwrap();
        let b = std::fs::read(out_b.join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
}

#[test]
fn worker_count_does_not_change_rollout_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cfg_path = write_config(&cfg, tmp.path());
    let out = tmp.path().join("w1");
    expect_ok("simulate", &cfg_path, &out, &[]);
    expect_ok("train", &cfg_path, &out, &[]);
    expect_ok("rollout", &cfg_path, &out, &["--workers", "1"]);
    let first: Vec<Vec<u8>> = (0..cfg.sample.ensemble_size)
        .map(|i| std::fs::read(out.join(format!("rollouts/member_{i:04}.traj"))).unwrap())
        .collect();

    // Re-run the rollout stage in place with more workers.
    expect_ok("rollout", &cfg_path, &out, &["--workers", "3"]);
    for (i, bytes) in first.iter().enumerate() {
        let again = std::fs::read(out.join(format!("rollouts/member_{i:04}.traj"))).unwrap();
        assert_eq!(bytes, &again, "member {i} depends on worker count");
    }
}

#[test]
fn analyze_on_reference_copies_reports_zero_error_full_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.system.burn_in_frames = 0;
    // Tail window spanning whole members, so the model pool is exactly the
    // reference pool when the rollout directory holds reference copies.
    let frames = cfg.system.n_steps / cfg.system.save_stride + 1;
    cfg.sample.n_steps = frames - 1;
    cfg.sample.tail_window = frames as usize;
    cfg.validate().unwrap();
    let cfg_path = write_config(&cfg, tmp.path());
    let out = tmp.path().join("out");
    expect_ok("simulate", &cfg_path, &out, &[]);

    let rollouts = out.join("rollouts");
    std::fs::create_dir_all(&rollouts).unwrap();
    let mut refs: Vec<PathBuf> = std::fs::read_dir(out.join("trajectories"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    refs.sort();
    for (i, p) in refs.iter().enumerate() {
        std::fs::copy(p, rollouts.join(format!("member_{i:04}.traj"))).unwrap();
    }

    expect_ok("analyze", &cfg_path, &out, &[]);
    let table = itolab::analysis::read_csv(&out.join("analysis/metrics.csv")).unwrap();
    let row = &table.rows[0];
    let col = |name: &str| {
        let idx = table.columns.iter().position(|c| c == name).unwrap();
        row[idx]
    };
    assert_eq!(col("mae"), 0.0);
    assert_eq!(col("rmse"), 0.0);
    assert_eq!(col("coverage"), 1.0);
    assert_eq!(col("n_reference_frames"), col("n_model_frames"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.system.n_steps = 200;
    cfg.system.burn_in_frames = 0;
    cfg.validate().unwrap();
    let cfg_path = write_config(&cfg, tmp.path());
    let out = tmp.path().join("out");
    expect_ok("simulate", &cfg_path, &out, &["--seed", "7"]);
    let man = read_manifest(&out, "simulate");
    assert_eq!(man.root_seed, 7);
    let mut with_seed = cfg.clone();
    with_seed.seed = 7;
    assert_eq!(man.config_hash, config_hash(&with_seed));
}

#[test]
fn failures_exit_with_documented_codes_and_json_records() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    // Config violations: exit 2 with a machine-readable record on stderr.
    let mut bad = tiny_config();
    bad.system.timestep = -1.0;
    let bad_path = tmp.path().join("bad.json");
    std::fs::write(&bad_path, serde_json::to_string(&bad).unwrap()).unwrap();
    let o = run_stage("simulate", &bad_path, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let record: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert_eq!(record["exit_code"], 2);
    assert_eq!(record["stage"], "simulate");
    assert!(record["error"].as_str().unwrap().contains("system.timestep"));

    // Stage ordering violations are config-class errors.
    let cfg = tiny_config();
    let cfg_path = write_config(&cfg, tmp.path());
    let o = run_stage("analyze", &cfg_path, &tmp.path().join("empty"), &[]);
    assert_eq!(o.status.code(), Some(2));

    // Corrupt input files: exit 4.
    let out2 = tmp.path().join("corrupt");
    std::fs::create_dir_all(out2.join("trajectories")).unwrap();
    std::fs::write(out2.join("trajectories/x.traj"), b"not a trajectory").unwrap();
    let o = run_stage("train", &cfg_path, &out2, &[]);
    assert_eq!(o.status.code(), Some(4));

    // Flag misuse.
    let o = Command::new(bin())
        .args(["simulate", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "missing --config/--preset");
    let o = Command::new(bin())
        .args(["simulate", "--config"])
        .arg(&cfg_path)
        .args(["--preset", "ou", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "--config with --preset");
    let o = Command::new(bin()).args(["simulate", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "missing --out");
    let o = Command::new(bin()).args(["frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "unknown subcommand");
    let o = Command::new(bin()).args(["--help"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(bin())
        .args(["simulate", "--preset", "no_such_preset", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
