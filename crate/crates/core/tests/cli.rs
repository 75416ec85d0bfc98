//! End-to-end smoke tests for the `textpose` binary: drives the full
//! generate / validate / train / eval / sweep / robustness pipeline through
//! the CLI and checks exit codes on the common failure paths.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_textpose"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, want: i32, what: &str) {
    let code = out.status.code().expect("exit code");
    assert_eq!(
        code,
        want,
        "{what}: expected exit {want}, got {code}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Tiny six-category run configuration pointing at `data_root`.
fn write_tiny_config(dir: &Path, data_root: &Path) -> PathBuf {
    let text = format!(
        r#"
seed = 5
[data]
root = "{root}"
train = ["beetle", "quadruped", "bird", "fish"]
val = ["spider"]
test = ["snake"]
[model]
capacity = 14
model_dim = 16
text_dim = 16
image_dim = 16
patch = 8
[model.encoder]
num_blocks = 2
model_dim = 16
num_heads = 2
ffn_dim = 32
[model.decoder]
num_layers = 1
model_dim = 16
num_heads = 2
ffn_dim = 32
[optim]
lr = 3e-3
epochs = 2
milestones = [1]
batch_size = 4
"#,
        root = data_root.display()
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn shipped_table() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/data/synonyms.txt").to_string()
}

#[test]
fn full_pipeline_runs_through_the_cli() {
    let dir = TempDir::new().unwrap();
    let ds = dir.path().join("ds");
    let ds_s = ds.to_str().unwrap();

    let out = run(&[
        "synth-gen",
        "--out",
        ds_s,
        "--seed",
        "3",
        "--categories",
        "6",
        "--samples",
        "6",
        "--image-size",
        "32",
    ]);
    assert_code(&out, 0, "synth-gen");
    assert!(stdout(&out).contains("6 categories x 6 samples at 32px"));

    let cfg = write_tiny_config(dir.path(), &ds);
    let cfg_s = cfg.to_str().unwrap();

    let out = run(&["validate-data", "--config", cfg_s]);
    assert_code(&out, 0, "validate-data");
    assert!(stdout(&out).contains("4 train / 1 val / 1 test"));
    assert!(stdout(&out).contains("quadruped: 12 keypoints, 6 samples"));

    let run_dir = dir.path().join("run");
    let run_s = run_dir.to_str().unwrap();
    let out = run(&["train", "--config", cfg_s, "--out", run_s]);
    assert_code(&out, 0, "train");
    assert!(stdout(&out).contains("trained 2 epochs"));
    let ckpt = run_dir.join("checkpoint.tpck");
    assert!(ckpt.exists());
    assert!(run_dir.join("metrics.ndjson").exists());
    let ckpt_s = ckpt.to_str().unwrap();

    let report = dir.path().join("eval.json");
    let out =
        run(&["eval", "--checkpoint", ckpt_s, "--split", "test", "--out", report.to_str().unwrap()]);
    assert_code(&out, 0, "eval");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["split"], "test");
    assert!(parsed["per_category"]["snake"]["pck"].is_number());
    assert!(parsed["mean_pck"].is_number());

    let sweep = dir.path().join("sweep.csv");
    let out = run(&[
        "mask-sweep",
        "--checkpoint",
        ckpt_s,
        "--fractions",
        "0,0.5",
        "--out",
        sweep.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "mask-sweep");
    let csv = std::fs::read_to_string(&sweep).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header plus one row per fraction:\n{csv}");
    assert_eq!(lines[0], "fraction,mean_pck");
    assert!(lines[1].starts_with("0,"));
    assert!(lines[2].starts_with("0.5,"));

    let robust = dir.path().join("robust.json");
    let out = run(&[
        "robustness",
        "--checkpoint",
        ckpt_s,
        "--modes",
        "identity,synonym",
        "--table",
        &shipped_table(),
        "--out",
        robust.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "robustness");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&robust).unwrap()).unwrap();
    assert_eq!(parsed["split"], "val");
    assert_eq!(parsed["modes"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("robust.csv")).unwrap();
    assert!(csv.starts_with("mode,category,keypoint,description,mean_displacement_px"));
    assert!(csv.contains("identity,spider,0,"));
}

#[test]
fn eval_with_a_missing_checkpoint_exits_with_the_data_code() {
    let out = run(&["eval", "--checkpoint", "/nonexistent/ckpt.tpck"]);
    assert_code(&out, 2, "missing checkpoint");
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_with_an_invalid_config_exits_with_the_data_code() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 2, "invalid config");
}

#[test]
fn unknown_flags_exit_with_the_usage_code() {
    let out = run(&["eval", "--no-such-flag"]);
    assert_code(&out, 1, "unknown flag");
}

#[test]
fn help_and_version_succeed() {
    let out = run(&["--help"]);
    assert_code(&out, 0, "--help");
    assert!(stdout(&out).contains("textpose"));
    let out = run(&["--version"]);
    assert_code(&out, 0, "--version");
}

#[test]
fn synth_gen_rejects_more_categories_than_templates() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "synth-gen",
        "--out",
        dir.path().join("ds").to_str().unwrap(),
        "--categories",
        "99",
    ]);
    assert_code(&out, 2, "too many categories");
}
