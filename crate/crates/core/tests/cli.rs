use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mixrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixrec"))
        .current_dir(dir)
        .args(args)
        .env_remove("MIXREC_LR")
        .output()
        .expect("spawn mixrec")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_synth(dir: &Path) {
    ok(&mixrec(
        dir,
        &[
            "synth", "--out", "data.tsv", "--set", "users=120", "--set", "items=60", "--set",
            "synth_seed=5",
        ],
    ));
}

const SMALL: [&str; 6] = ["--set", "dim=8", "--set", "hyperedges=4", "--set", "batch_size=64"];

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    for run in ["a", "b"] {
        let mut args = vec!["train", "--data", "data.tsv", "--epochs", "1", "--seed", "7", "--run-dir", run];
        args.extend(SMALL);
        ok(&mixrec(dir.path(), &args));
    }
    let a = fs::read(dir.path().join("a/metrics.json")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.json")).unwrap();
    assert_eq!(a, b);
    let m = json(&dir.path().join("a/metrics.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    let cfg = json(&dir.path().join("a/config.json"));
    assert_eq!(cfg["config_hash"], m["config_hash"]);
    assert_eq!(cfg["config"]["dim"], "8");
    for f in ["checkpoint.json", "epochs.csv", "complexity.json", "split/train.tsv"] {
        assert!(dir.path().join("a").join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(dir.path().join("a/epochs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn ablation_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let mut args = vec!["train", "--data", "data.tsv", "--epochs", "1", "--ablate", "no_node_cl", "--run-dir", "r"];
    args.extend(SMALL);
    ok(&mixrec(dir.path(), &args));
    let m = json(&dir.path().join("r/metrics.json"));
    assert_eq!(m["active"]["node_cl"], false);
    assert_eq!(m["active"]["meta"], false);
    assert_eq!(m["active"]["graph_cl"], true);
    assert_eq!(m["ablations"], serde_json::json!(["no_node_cl"]));
}

#[test]
fn eval_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let mut args = vec!["train", "--data", "data.tsv", "--epochs", "2", "--run-dir", "r"];
    args.extend(SMALL);
    ok(&mixrec(dir.path(), &args));
    let out = mixrec(
        dir.path(),
        &["eval", "--checkpoint", "r/checkpoint.json", "--split", "r/split", "--out", "e.json"],
    );
    ok(&out);
    let trained = json(&dir.path().join("r/metrics.json"));
    let evald = json(&dir.path().join("e.json"));
    assert_eq!(trained["hr"], evald["hr"]);
    assert_eq!(trained["ndcg"], evald["ndcg"]);
    assert_eq!(evald["epoch"], 2);
}

#[test]
fn config_layers_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    fs::write(dir.path().join("bad.cfg"), "dim = 8\nlearning_rate = 0.1\n").unwrap();
    let out = mixrec(dir.path(), &["train", "--data", "data.tsv", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = Command::new(env!("CARGO_BIN_EXE_mixrec"))
        .current_dir(dir.path())
        .args(["gradcheck"])
        .env("MIXREC_LERNING_RATE", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // file < env < flag
    fs::write(dir.path().join("run.cfg"), "dim = 4\nlayers = 1\nhyperedges = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mixrec"))
        .current_dir(dir.path())
        .args([
            "train", "--data", "data.tsv", "--config", "run.cfg", "--set", "layers=3", "--epochs",
            "0", "--run-dir", "r",
        ])
        .env("MIXREC_DIM", "6")
        .env("MIXREC_LAYERS", "2")
        .output()
        .unwrap();
    ok(&out);
    let cfg = json(&dir.path().join("r/config.json"));
    assert_eq!(cfg["config"]["dim"], "6");
    assert_eq!(cfg["config"]["layers"], "3");
    assert_eq!(cfg["config"]["hyperedges"], "2");
}

#[test]
fn gradcheck_and_diag_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixrec(dir.path(), &["gradcheck", "--out", "g.json"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let g = json(&dir.path().join("g.json"));
    assert!(g["max_rel"].as_f64().unwrap() < 1e-6);

    let out = mixrec(dir.path(), &["gradcheck", "--tol", "1e-300"]);
    assert_eq!(out.status.code(), Some(2));

    let out = mixrec(dir.path(), &["diag", "--instances", "5"]);
    ok(&out);
    let out = mixrec(dir.path(), &["diag", "--instances", "2", "--tol=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mixrec(dir.path(), &["diag", "--set", "slope=0.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diag_complexity_reports_components() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let mut args = vec!["diag", "--complexity", "data.tsv", "--out", "c.json"];
    args.extend(SMALL);
    ok(&mixrec(dir.path(), &args));
    let c = json(&dir.path().join("c.json"));
    let names: Vec<&str> = c["components"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["graph", "hypergraph", "contrastive"]);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let mut args = vec![
        "sweep", "--data", "data.tsv", "--out", "grid.csv", "--grid", "lr=0.001,0.01", "--grid",
        "layers=1,2", "--set", "epochs=1",
    ];
    args.extend(SMALL);
    ok(&mixrec(dir.path(), &args));
    let csv = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("lr,layers,config_hash,hr_at_5"));
    assert!(lines[1].starts_with("0.001,1,"));
    assert!(lines[4].starts_with("0.01,2,"));
}

#[test]
fn divergence_exits_nonzero_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let mut args = vec![
        "train", "--data", "data.tsv", "--epochs", "3", "--set", "lr=1e200", "--set",
        "optimizer=sgd", "--run-dir", "r",
    ];
    args.extend(SMALL);
    let out = mixrec(dir.path(), &args);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("r/checkpoint.json").exists());
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.tsv"), "0 0 0\n1 x 2\n").unwrap();
    let out = mixrec(dir.path(), &["train", "--data", "bad.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let out = mixrec(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    let out = mixrec(dir.path(), &["frobnicate"]);
    assert_ne!(out.status.code(), Some(0));
}
