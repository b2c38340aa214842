use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seeds = [0, 1, 2, 3, 4]
methods = ["source_only", "dccl"]

[corpus]
source_train = 192
target_train = 192
source_val = 64
source_test = 64
target_test = 128

[train]
epochs = 2
"#;

fn dccl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dccl"))
        .current_dir(cwd)
        .env_remove("DCCL_OUT_ROOT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn training_twice_gives_identical_files() {
    let ws = workspace();
    for out in ["a", "b"] {
        ok(&dccl(
            ws.path(),
            &["train", "--config", "small.toml", "--method", "dccl", "--seed", "7", "--out", out],
        ));
    }
    for f in ["metrics.jsonl", "model.ckpt", "outcome.json", "config.toml", "manifest.json"] {
        let a = fs::read(ws.path().join("a").join(f)).unwrap();
        let b = fs::read(ws.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let outcome = json(&ws.path().join("a/outcome.json"));
    assert_eq!(outcome["method"], "dccl");
    assert_eq!(outcome["seed"], 7);
    assert_eq!(outcome["label_reads"]["target"], 0);
    let lines = fs::read_to_string(ws.path().join("a/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
}

#[test]
fn matrix_emits_one_summary_per_method_against_source_only() {
    let ws = workspace();
    ok(&dccl(ws.path(), &["matrix", "--config", "small.toml", "--out", "grid"]));
    let grid = ws.path().join("grid");
    let summaries = fs::read_to_string(grid.join("summaries.jsonl")).unwrap();
    let rows: Vec<Value> = summaries.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let s = &rows[0];
    assert_eq!(s["method"], "dccl");
    assert_eq!(s["reference"], "source_only");
    assert_eq!(s["scores"].as_array().unwrap().len(), 5);
    for key in ["mean", "std", "p_value"] {
        assert!(s[key].is_number(), "{key}");
    }
    let csv = fs::read_to_string(grid.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(grid.join("cells/dccl-s4/model.ckpt").exists());
}

#[test]
fn manifest_hash_matches_a_reparse_and_lists_every_file() {
    let ws = workspace();
    ok(&dccl(ws.path(), &["generate-data", "--config", "small.toml", "--out", "data"]));
    let manifest = json(&ws.path().join("data/manifest.json"));
    // re-running from the copied config reproduces the hash
    ok(&dccl(ws.path(), &["generate-data", "--config", "data/config.toml", "--out", "again"]));
    let again = json(&ws.path().join("again/manifest.json"));
    assert_eq!(manifest["config_sha256"], again["config_sha256"]);
    assert_eq!(manifest["files"], again["files"]);

    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(names.contains(&"config.toml"));
    assert!(names.contains(&"corpus/target_train.jsonl"));
    for f in files {
        let bytes = fs::read(ws.path().join("data").join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
}

#[test]
fn commands_write_only_inside_their_run_directory() {
    let ws = workspace();
    ok(&dccl(ws.path(), &["generate-data", "--config", "small.toml", "--out", "data"]));
    ok(&dccl(
        ws.path(),
        &["train", "--config", "small.toml", "--corpus", "data/corpus", "--method", "source_only", "--out", "runs/t"],
    ));
    let ckpt = "runs/t/model.ckpt";
    ok(&dccl(ws.path(), &["evaluate", "--config", "small.toml", "--checkpoint", ckpt, "--corpus", "data/corpus", "--embeddings", "--out", "runs/e"]));
    ok(&dccl(ws.path(), &["a-distance", "--config", "small.toml", "--checkpoint", ckpt, "--out", "runs/d"]));
    ok(&dccl(ws.path(), &["mask-stats", "--config", "small.toml", "--corpus", "data/corpus", "--out", "runs/m"]));

    let mut top: Vec<String> = fs::read_dir(ws.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["data", "runs", "small.toml"]);
    let mut runs: Vec<String> = fs::read_dir(ws.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    runs.sort();
    assert_eq!(runs, ["d", "e", "m", "t"]);

    let eval = json(&ws.path().join("runs/e/evaluation.json"));
    let train = json(&ws.path().join("runs/t/outcome.json"));
    assert_eq!(eval["accuracy"], train["accuracy"]);
    let inputs = json(&ws.path().join("runs/e/manifest.json"))["inputs"].clone();
    assert_eq!(inputs.as_array().unwrap().len(), 6);
    assert!(ws.path().join("runs/e/embeddings.tsv").exists());
    assert!(ws.path().join("runs/m/token_ratios.csv").exists());
    let d = json(&ws.path().join("runs/d/a_distance.json"));
    assert_eq!(d["splits"], "test");
}

#[test]
fn default_run_directory_lives_under_the_output_root() {
    let ws = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_dccl"))
        .current_dir(ws.path())
        .env("DCCL_OUT_ROOT", "root")
        .args(["mask-stats", "--config", "small.toml"])
        .output()
        .unwrap();
    ok(&out);
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(printed.trim().starts_with("root/mask-stats-"), "{printed}");
    assert!(ws.path().join(printed.trim()).join("manifest.json").exists());
}

#[test]
fn unknown_config_key_exits_with_one_and_names_it() {
    let ws = workspace();
    fs::write(ws.path().join("bad.toml"), "[train.perturb]\nepsilonn = 0.1\n").unwrap();
    let out = dccl(ws.path(), &["train", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilonn"));
    assert!(!ws.path().join("x").exists());

    let out = dccl(ws.path(), &["train", "--preset", "huge"]);
    assert_eq!(out.status.code(), Some(1));
    let out = dccl(ws.path(), &["train", "--config", "small.toml", "--method", "magic"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_values_are_config_errors() {
    let ws = workspace();
    fs::write(ws.path().join("bad.toml"), "[train]\nbatch_size = 1\n").unwrap();
    let out = dccl(ws.path(), &["train", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two_and_name_the_step() {
    let ws = workspace();
    let out = dccl(ws.path(), &["evaluate", "--checkpoint", "missing.ckpt", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading checkpoint"));
}

#[test]
fn occupied_run_directory_is_refused() {
    let ws = workspace();
    fs::create_dir(ws.path().join("busy")).unwrap();
    fs::write(ws.path().join("busy/keep.txt"), "x").unwrap();
    let out = dccl(ws.path(), &["mask-stats", "--config", "small.toml", "--out", "busy"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_dir(ws.path().join("busy")).unwrap().count(), 1);
}
