//! End-to-end tests of the `caspl` binary: exit codes, artifact layout,
//! resumability, and flag/environment precedence, all on a configuration
//! small enough to train in seconds.

use std::path::Path;
use std::process::{Command, Output};

fn caspl(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_caspl"));
    // The environment default must never leak into tests that pass --out.
    cmd.env_remove("CASPL_OUT");
    cmd.args(args);
    cmd
}

fn run(args: &[&str]) -> Output {
    caspl(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A 4-class, 8×8-pixel, depth-2 configuration that trains in seconds.
fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let body = r#"{
  "seeds": 1,
  "shots": 2,
  "domain": {"classes": 4, "image_size": 8, "train_per_class": 6, "test_per_class": 3, "max_shift": 1},
  "model": {
    "student": {"depth": 2, "width": 8, "heads": 2, "max_seq": 24, "patch_size": 4},
    "teacher": {"depth": 2, "width": 16, "heads": 2, "max_seq": 24, "patch_size": 4},
    "d_shared": 6
  },
  "pretrain": {"epochs": 2, "batch_size": 4},
  "boost": {"epochs": 2, "batch_size": 8, "length": 2},
  "adapt": {"text_length": 2, "vision_length": 2, "epochs": 2}
}"#;
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_subcommand_and_global_flag() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    for word in
        ["gen-data", "pretrain", "boost", "adapt", "eval", "ablate", "report", "--config",
         "--seed", "--out", "--workers", "CASPL_OUT"]
    {
        assert!(text.contains(word), "--help is missing `{word}`:\n{text}");
    }
}

#[test]
fn missing_config_file_is_an_io_error_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("ws");
    let out = run(&[
        "--config",
        "/nonexistent/lab.json",
        "--out",
        out_dir.to_str().unwrap(),
        "gen-data",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("/nonexistent/lab.json"));
}

#[test]
fn schema_violations_exit_with_the_config_code_and_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"boost": {"learning_rate": 0.5}}"#).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", "unused", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("boost") && err.contains("learning_rate"), "{err}");

    std::fs::write(&cfg, r#"{"shots": 5}"#).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", "unused", "gen-data"]);
    assert_eq!(out.status.code(), Some(2), "invalid value: {}", stderr_of(&out));
}

#[test]
fn unknown_grid_and_unknown_variant_are_usage_errors() {
    let out = run(&["ablate", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("depth-grid"), "{}", stderr_of(&out));

    let out = run(&["adapt", "--variant", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_run_round_trips_artifacts_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let ws = dir.path().join("ws");
    let ws_s = ws.to_str().unwrap();

    let out = run(&["--config", &cfg, "--out", ws_s, "--seed", "9", "gen-data"]);
    assert!(out.status.success(), "gen-data: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("pixel probe"));
    assert!(ws.join("data/source.bin").exists());

    // The resolved snapshot reflects the flag override.
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.join("config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["seed"], 9);

    let out = run(&[
        "--config", &cfg, "--out", ws_s, "--seed", "9",
        "adapt", "--variant", "text-shallow",
    ]);
    assert!(out.status.success(), "adapt: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("text-shallow over 1 seed(s)"));
    let report = ws.join("reports/adapt_text-shallow_k2_cascade_r0.json");
    assert!(report.exists());
    assert!(ws.join("prompts/boost.bin").exists(), "adapt trains the boost checkpoint once");

    // Re-running adapts nothing: the stored report is returned unchanged.
    let before = std::fs::read(&report).unwrap();
    let out = run(&[
        "--config", &cfg, "--out", ws_s, "--seed", "9",
        "adapt", "--variant", "text-shallow",
    ]);
    assert!(out.status.success());
    assert_eq!(before, std::fs::read(&report).unwrap());

    let out = run(&["--config", &cfg, "--out", ws_s, "--seed", "9", "eval"]);
    assert!(out.status.success(), "eval: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("zero-shot"));

    let out = run(&["--config", &cfg, "--out", ws_s, "--seed", "9", "ablate", "equal-vlp",
        "--workers", "2"]);
    assert!(out.status.success(), "ablate: {}", stderr_of(&out));
    assert!(ws.join("ablate/equal_vlp.csv").exists());

    let out = run(&["--out", ws_s, "report"]);
    assert!(out.status.success(), "report: {}", stderr_of(&out));
    let table = stdout_of(&out);
    assert!(table.contains("adapt_text-shallow_k2_cascade_r0.json"), "{table}");
    assert!(table.contains("zero_shot.json"));
    assert!(table.contains("equal_vlp.csv"));
    assert!(ws.join("reports/summary.json").exists());
}

#[test]
fn caspl_out_env_sets_the_default_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let ws = dir.path().join("from-env");
    let out = caspl(&["--config", &cfg, "gen-data"])
        .env("CASPL_OUT", &ws)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(ws.join("data/source.bin").exists());
}
