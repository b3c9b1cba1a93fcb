//! End-to-end tests of the `rime` binary: the full
//! experts → demos → imitation → sweep → compare pipeline on a desk-scale
//! setup, plus exit-code and determinism contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rime")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn write_manifest(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).expect("manifest written");
    path
}

fn point_mass_manifest(out_dir: &Path, algorithm: &str) -> String {
    format!(
        r#"
[run]
id = "itest"
family = "point-mass"
zeta_param = "mass"
zetas = [0.5, 1.5]
seed = 11
out_dir = {out_dir:?}

[expert]
kind = "pd"
eval_episodes = 2

[demos]
n_traj = 3
sigma = 0.02
state_only = false

[il]
algorithm = {algorithm:?}
total_steps = 1200
batch_size = 200
disc_epochs = 2
disc_minibatch = 64

[sweep]
lo = 0.5
hi = 1.5
step = 0.5
episodes = 2
"#,
        out_dir = out_dir.to_str().unwrap(),
        algorithm = algorithm
    )
}

#[test]
fn pipeline_produces_checkpoint_sweep_and_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let manifest = write_manifest(tmp.path(), &point_mass_manifest(&out, "rime"));
    let cfg = manifest.to_str().unwrap();

    assert_ok(&run(&["train-expert", "--config", cfg]), "train-expert");
    assert!(out.join("expert_mass_0.5.ntc").exists());
    assert!(out.join("expert_mass_1.5.ntc").exists());
    assert!(out.join("experts_report.json").exists());

    assert_ok(&run(&["gen-demos", "--config", cfg]), "gen-demos");
    assert!(out.join("demos_mass_0.5.demo.txt").exists());

    assert_ok(&run(&["train-il", "--config", cfg]), "train-il");
    assert!(out.join("il_checkpoint.ntc").exists());
    assert!(out.join("metrics.jsonl").exists());
    assert!(out.join("events.log").exists());

    assert_ok(&run(&["sweep", "--config", cfg]), "sweep");
    let csv = out.join("itest_rime_point-mass.sweep.csv");
    let json = out.join("itest_rime_point-mass.sweep.json");
    assert!(csv.exists() && json.exists());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "zeta_mass,mean,std,n_episodes");
    assert_eq!(lines.count(), 3, "three grid points at step 0.5");

    let cmp = run(&[
        "compare",
        json.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&cmp, "compare");
    assert!(out.join("comparison.txt").exists());
    assert!(out.join("comparison.csv").exists());
    let table = String::from_utf8_lossy(&cmp.stdout).into_owned();
    assert!(
        table.contains("itest_rime_point-mass"),
        "comparison names rows after the report files: {table}"
    );
}

#[test]
fn rerunning_a_stage_rewrites_artifacts_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let manifest = write_manifest(tmp.path(), &point_mass_manifest(&out, "gail-single"));
    let cfg = manifest.to_str().unwrap();

    assert_ok(&run(&["train-expert", "--config", cfg]), "train-expert");
    assert_ok(&run(&["gen-demos", "--config", cfg]), "gen-demos");
    assert_ok(&run(&["train-il", "--config", cfg]), "train-il 1");
    let first_ckpt = std::fs::read(out.join("il_checkpoint.ntc")).unwrap();
    let first_metrics = std::fs::read(out.join("metrics.jsonl")).unwrap();

    assert_ok(&run(&["train-il", "--config", cfg]), "train-il 2");
    let second_ckpt = std::fs::read(out.join("il_checkpoint.ntc")).unwrap();
    let second_metrics = std::fs::read(out.join("metrics.jsonl")).unwrap();

    assert_eq!(first_ckpt, second_ckpt, "checkpoint bytes differ on rerun");
    assert_eq!(first_metrics, second_metrics, "metrics differ on rerun");
}

#[test]
fn behavior_cloning_checkpoints_feed_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let manifest = write_manifest(tmp.path(), &point_mass_manifest(&out, "bc"));
    let cfg = manifest.to_str().unwrap();

    assert_ok(&run(&["train-expert", "--config", cfg]), "train-expert");
    assert_ok(&run(&["gen-demos", "--config", cfg]), "gen-demos");
    assert_ok(&run(&["train-il", "--config", cfg]), "train-il (bc)");
    assert!(out.join("bc_checkpoint.ntc").exists());
    assert!(out.join("metrics.jsonl").exists());

    assert_ok(&run(&["sweep", "--config", cfg]), "sweep on bc checkpoint");
    assert!(out.join("itest_bc_point-mass.sweep.csv").exists());
}

#[test]
fn unknown_config_keys_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_manifest(
        tmp.path(),
        r#"
[run]
id = "bad"
family = "point-mass"
zeta_param = "mass"
zetas = [1.0]
seed = 1
out_dir = "/tmp/nowhere"
mystery_knob = 3
"#,
    );
    let out = run(&["train-expert", "--config", manifest.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("mystery_knob"), "stderr names the bad key: {err}");
}

#[test]
fn missing_artifacts_exit_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let manifest = write_manifest(tmp.path(), &point_mass_manifest(&out_dir, "rime"));
    let cfg = manifest.to_str().unwrap();

    // No demos recorded yet.
    assert_eq!(exit_code(&run(&["train-il", "--config", cfg])), 3);
    // No experts saved yet.
    assert_eq!(exit_code(&run(&["gen-demos", "--config", cfg])), 3);
    // No checkpoint trained yet.
    assert_eq!(exit_code(&run(&["sweep", "--config", cfg])), 3);
    // Compare pointed at a file that does not exist.
    assert_eq!(
        exit_code(&run(&["compare", "/tmp/definitely/not/here.sweep.json"])),
        3
    );
}

#[test]
fn theory_checks_pass_and_write_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["verify-theory", "--out", tmp.path().to_str().unwrap()]);
    assert_ok(&out, "verify-theory");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(!stdout.contains("FAIL"), "all checks pass: {stdout}");
    assert!(stdout.matches("PASS").count() >= 5);
    let report = std::fs::read_to_string(tmp.path().join("theory_report.txt")).unwrap();
    assert_eq!(report.matches("PASS").count(), stdout.matches("PASS").count());
}

#[test]
fn grid_family_uses_exact_experts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let manifest = write_manifest(
        tmp.path(),
        &format!(
            r#"
[run]
id = "grid"
family = "windy-grid"
zeta_param = "wind"
zetas = [1.0]
seed = 3
out_dir = {out_dir:?}

[expert]
kind = "value-iteration"
eval_episodes = 3
"#,
            out_dir = out_dir.to_str().unwrap()
        ),
    );
    let out = run(&["train-expert", "--config", manifest.to_str().unwrap()]);
    assert_ok(&out, "value-iteration expert");
    assert!(out_dir.join("expert_wind_1.ntc").exists());
    let report = std::fs::read_to_string(out_dir.join("experts_report.json")).unwrap();
    assert!(report.contains("mean_return"));
}
