//! End-to-end CLI runs against a temporary workspace: prepare, train, eval
//! round-trip, ablate echo, sweep, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn dymus_bin() -> &'static str {
    env!("CARGO_BIN_EXE_dymus")
}

fn run(args: &[&str]) -> Output {
    Command::new(dymus_bin())
        .args(args)
        .output()
        .expect("spawning the dymus binary")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out_dir = dir.join("runs");
    let config = format!(
        r#"
[run]
out_dir = "{}"

[data]
source = "synthetic"

[data.synthetic]
users = 40
items = 12
behaviors = 2
correlation_strength = 0.9
seed = 3
purchases_per_user = 8
clicks_per_purchase = 3
category_size = 4
anchor_window = 2
exact_share = 0.9
popular_count = 5

[model]
kind = "dymus"
embed_dim = 6
capsule_len = 2
routing_iters = 2
dropout = 0.0
seq_cap = 6

[train]
learning_rate = 0.01
batch_size = 8
max_epochs = 3
patience = 10
seed = 5

[eval]
ks = [10]

[analysis]
sweep_capsule_lens = [2]
sweep_routing_iters = [1, 2]
"#,
        out_dir.display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn full_pipeline_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();

    // train before prepare: clear failure.
    let out = run(&["train", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prepare"));

    let out = run(&["prepare", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("#Users"));
    assert!(stdout.contains("#purchases"));
    assert!(stdout.contains("#clicks"));

    // prepare again without --force refuses; with --force succeeds.
    let out = run(&["prepare", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert!(run(&["prepare", "--config", cfg, "--force"]).status.success());

    let out = run(&["train", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // The run directory is named by the config hash and holds the artifacts.
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("run-"))
        .collect();
    assert_eq!(runs.len(), 1);
    let run_dir = runs[0].path();
    assert!(run_dir.join("checkpoint.json").exists());
    assert!(run_dir.join("metrics.json").exists());
    assert!(run_dir.join("epochs.csv").exists());

    // eval reproduces the recorded validation metrics bit for bit.
    let out = run(&["eval", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap();
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(metrics["validation"]["hr"], eval["validation"]["hr"]);
    assert_eq!(metrics["validation"]["ndcg"], eval["validation"]["ndcg"]);
    assert_eq!(metrics["test"]["ndcg"], eval["test"]["ndcg"]);

    // Re-training without --force refuses to overwrite the checkpoint.
    let out = run(&["train", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));

    // A seed override lands in a different run directory.
    let out = run(&["train", "--config", cfg, "--seed", "99"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs_after: Vec<_> = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("run-"))
        .collect();
    assert_eq!(runs_after.len(), 2);
}

#[test]
fn ablate_echoes_the_removed_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();
    assert!(run(&["prepare", "--config", cfg]).status.success());

    // Restrict to one arm to keep this quick: remove the click behavior.
    let text = std::fs::read_to_string(&config).unwrap().replace(
        "[analysis]",
        "[analysis]\nablations = [{ integrator = \"dynamic_routing\", removed_behaviors = [1] }]",
    );
    std::fs::write(&config, text).unwrap();
    assert!(run(&["prepare", "--config", cfg]).status.success());

    let out = run(&["ablate", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("run-"))
        .collect();
    let report_path = runs
        .iter()
        .map(|e| e.path().join("ablation.json"))
        .find(|p| p.exists())
        .expect("ablation.json written");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(report[0]["spec"]["removed_behaviors"][0], 1);
}

#[test]
fn sweep_writes_grid_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();
    assert!(run(&["prepare", "--config", cfg]).status.success());
    let out = run(&["sweep", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .filter_map(|e| e.ok())
        .collect();
    let csv_path = runs
        .iter()
        .map(|e| e.path().join("sweep.csv"))
        .find(|p| p.exists())
        .expect("sweep.csv written");
    let csv = std::fs::read_to_string(csv_path).unwrap();
    assert!(csv.starts_with("capsule_len,routing_iters,validation_ndcg10"));
    assert_eq!(csv.lines().count(), 3); // header + 2 cells
}

#[test]
fn config_problems_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown key.
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[data]\nsource = \"synthetic\"\nbogus_key = 1\n").unwrap();
    let out = run(&["prepare", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Missing synthetic section.
    std::fs::write(
        &path,
        "[data]\nsource = \"synthetic\"\n[model]\nkind = \"dymus\"\nembed_dim = 4\ncapsule_len = 2\nrouting_iters = 1\n[train]\nlearning_rate = 0.01\nmax_epochs = 1\nseed = 1\n",
    )
    .unwrap();
    let out = run(&["prepare", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.synthetic"));

    // Missing input file for a log source.
    std::fs::write(
        &path,
        r#"
[data]
source = "log"
path = "/nonexistent/taobao.csv"
[data.schema]
columns = { user = 0, item = 1, behavior = 3, timestamp = 4 }
behavior_map = { buy = "purchase", pv = "click" }
target_behavior = "purchase"
[model]
kind = "dymus"
embed_dim = 4
capsule_len = 2
routing_iters = 1
[train]
learning_rate = 0.01
max_epochs = 1
seed = 1
"#,
    )
    .unwrap();
    let out = run(&["prepare", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot open"));
}

/// The resolved config written next to the checkpoint carries the default
/// sweep grid, which must cover the documented capsule lengths.
#[test]
fn default_sweep_grid_covers_documented_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("min.toml");
    std::fs::write(
        &path,
        format!(
            r#"
[run]
out_dir = "{}"
[data]
source = "synthetic"
[data.synthetic]
users = 10
items = 10
behaviors = 2
correlation_strength = 0.5
seed = 1
[model]
kind = "single_gru"
embed_dim = 4
capsule_len = 2
routing_iters = 1
[train]
learning_rate = 0.01
max_epochs = 1
seed = 1
"#,
            dir.path().join("runs").display()
        ),
    )
    .unwrap();
    let cfg = path.to_str().unwrap();
    assert!(run(&["prepare", "--config", cfg]).status.success());
    let out = run(&["train", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let resolved_path = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("config.toml"))
        .find(|p| p.exists())
        .expect("resolved config written");
    let resolved: toml::Value = toml::from_str(&std::fs::read_to_string(resolved_path).unwrap()).unwrap();
    let lens: Vec<i64> = resolved["analysis"]["sweep_capsule_lens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_integer().unwrap())
        .collect();
    assert_eq!(lens, vec![2, 4, 8, 16, 32]);
    let iters: Vec<i64> = resolved["analysis"]["sweep_routing_iters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_integer().unwrap())
        .collect();
    assert_eq!(iters, vec![1, 2, 3, 4]);
}
