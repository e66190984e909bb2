use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semrel::head::{Head, HeadCheckpoint};
use tempfile::TempDir;

const SMALL: [&str; 6] = [
    "--set",
    "train.steps=60",
    "--set",
    "synth.train_per_class=8",
    "--set",
    "synth.test_per_class=4",
];

fn semrel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semrel")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = semrel(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

/// Base-trains a small head of the given mode into `dir/<name>`.
fn train(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let out_s = out.display().to_string();
    let mut args = with_small(&["train", "--seed", "7", "--out-dir", &out_s]);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn metadata(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metadata.json")).unwrap()).unwrap()
}

fn checkpoint(dir: &Path) -> Head {
    let ck: HeadCheckpoint = serde_json::from_str(&fs::read_to_string(dir.join("head.json")).unwrap()).unwrap();
    Head::from_checkpoint(ck).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn train_writes_reproducible_outputs() {
    let tmp = TempDir::new().unwrap();
    let a = train(tmp.path(), "a", &[]);
    let b = train(tmp.path(), "b", &[]);
    for f in ["head.json", "loss_trace.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let meta = metadata(&a);
    assert_eq!(meta["command"], "train");
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["config"]["train.steps"], 60);
    assert_eq!(fs::read_to_string(a.join("loss_trace.csv")).unwrap().lines().count(), 61);

    // Feeding metadata back as configuration reproduces the checkpoint.
    let c = tmp.path().join("c");
    ok(&["train", "--config", &path(&a, "metadata.json"), "--out-dir", &c.display().to_string()]);
    assert_eq!(fs::read(a.join("head.json")).unwrap(), fs::read(c.join("head.json")).unwrap());

    let d = tmp.path().join("d");
    ok(&with_small(&["train", "--set", "seed=8", "--seed", "9", "--out-dir", &d.display().to_string()]));
    assert_eq!(metadata(&d)["seed"], 9);
}

#[test]
fn missing_inputs_name_the_path() {
    let tmp = TempDir::new().unwrap();
    let out = semrel(&[
        "train",
        "--set",
        "embeddings.path=/no/such/vectors.txt",
        "--out-dir",
        &path(tmp.path(), "x"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/no/such/vectors.txt"), "{}", stderr(&out));

    let out = semrel(&["finetune", "--checkpoint", "/no/such/head.json", "--out-dir", &path(tmp.path(), "y")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/no/such/head.json"));

    let out = semrel(&["train", "--set", "nonsense", "--out-dir", &path(tmp.path(), "z")]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(semrel(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn finetune_modes_and_freezing() {
    let tmp = TempDir::new().unwrap();
    let base = train(tmp.path(), "base", &[]);
    let ck = path(&base, "head.json");

    let tuned = tmp.path().join("tuned");
    ok(&with_small(&["finetune", "--seed", "7", "--checkpoint", &ck, "--k", "1", "--graph-mode", "dynamic", "--out-dir", &tuned.display().to_string()]));
    assert_eq!(fs::read_to_string(tuned.join("episode.txt")).unwrap().lines().count(), 5 + 16);
    let meta = metadata(&tuned);
    assert_ne!(meta["hashes"]["params"], meta["hashes"]["input_params"]);

    let out = semrel(&with_small(&["finetune", "--checkpoint", &ck, "--graph-mode", "heuristic", "--out-dir", &path(tmp.path(), "h")]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--cooccurrence"));

    let out = semrel(&with_small(&["finetune", "--checkpoint", &ck, "--graph-mode", "sideways", "--out-dir", &path(tmp.path(), "s")]));
    assert_eq!(out.status.code(), Some(2));

    // Re-tuning a tuned checkpoint with everything frozen leaves it unchanged.
    let frozen = tmp.path().join("frozen");
    ok(&with_small(&["finetune", "--seed", "7", "--checkpoint", &path(&tuned, "head.json"), "--freeze", "all", "--out-dir", &frozen.display().to_string()]));
    assert_eq!(fs::read(tuned.join("head.json")).unwrap(), fs::read(frozen.join("head.json")).unwrap());
    let meta = metadata(&frozen);
    assert_eq!(meta["hashes"]["params"], meta["hashes"]["input_params"]);

    let decoupled = tmp.path().join("decoupled");
    ok(&with_small(&["finetune", "--checkpoint", &ck, "--decouple", "--out-dir", &decoupled.display().to_string()]));
    assert!(fs::read_to_string(decoupled.join("head.json")).unwrap().contains("reg_trunk.fc1.weight"));
}

#[test]
fn heuristic_finetune_and_graph_export() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&with_small(&["synth", "--seed", "7", "--out-dir", &data.display().to_string()]));
    for f in ["registry.json", "embeddings.txt", "train.jsonl", "test.jsonl", "cooccurrence.jsonl"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let base = train(tmp.path(), "base", &[]);
    let tuned = tmp.path().join("tuned");
    let co = path(&data, "cooccurrence.jsonl");
    ok(&with_small(&["finetune", "--seed", "7", "--checkpoint", &path(&base, "head.json"), "--graph-mode", "heuristic", "--cooccurrence", &co, "--out-dir", &tuned.display().to_string()]));

    let exported = tmp.path().join("graph");
    ok(&["export", "graph", "--checkpoint", &path(&tuned, "head.json"), "--out-dir", &exported.display().to_string()]);
    let rows = csv_rows(&fs::read_to_string(exported.join("graph.csv")).unwrap());
    assert_eq!(rows.len(), 21);
    for row in &rows {
        assert_eq!(row.len(), 21);
        // Entries are printed to nine significant digits.
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-7, "{row:?}");
    }

    let dynamic = tmp.path().join("dyn");
    ok(&["export", "graph", "--checkpoint", &path(&base, "head.json"), "--out-dir", &dynamic.display().to_string()]);
    for row in csv_rows(&fs::read_to_string(dynamic.join("graph.csv")).unwrap()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-7);
    }

    // Training from the synthesized files matches the in-memory benchmark up
    // to the last-bit change of re-normalizing the loaded embedding rows.
    let from_files = tmp.path().join("files");
    let set = |k: &str, f: &str| format!("{k}={}", path(&data, f));
    let (e, r, tr, te) = (
        set("embeddings.path", "embeddings.txt"),
        set("data.registry", "registry.json"),
        set("data.train", "train.jsonl"),
        set("data.test", "test.jsonl"),
    );
    ok(&with_small(&["train", "--seed", "7", "--set", &e, "--set", &r, "--set", &tr, "--set", &te, "--out-dir", &from_files.display().to_string()]));
    let (a, b) = (checkpoint(&from_files), checkpoint(&base));
    assert_eq!(a.registry(), b.registry());
    for (name, m) in a.params() {
        assert!(m.max_abs_diff(&b.params()[name]) < 1e-9, "{name}");
    }
}

#[test]
fn export_rejects_graphless_heads_and_correlates() {
    let tmp = TempDir::new().unwrap();
    let ssp = train(tmp.path(), "ssp", &["--set", "head.mode=\"ssp\"", "--set", "head.graph=\"none\""]);
    let out = semrel(&["export", "graph", "--checkpoint", &path(&ssp, "head.json"), "--out-dir", &path(tmp.path(), "g")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no class graph"));

    // A freshly attached relation module with nothing trained is the identity.
    let attached = tmp.path().join("attached");
    ok(&with_small(&["finetune", "--checkpoint", &path(&ssp, "head.json"), "--set", "head.mode=\"ssp\"", "--graph-mode", "dynamic", "--freeze", "all", "--out-dir", &attached.display().to_string()]));
    let maps = tmp.path().join("maps");
    ok(&["export", "correlate", "--checkpoint", &path(&attached, "head.json"), "--out-dir", &maps.display().to_string()]);
    let diff = csv_rows(&fs::read_to_string(maps.join("correlation_difference.csv")).unwrap());
    assert_eq!(diff.len(), 5);
    assert!(diff.iter().flatten().all(|&v| v == 0.0));
    let before = fs::read_to_string(maps.join("correlation_before.csv")).unwrap();
    assert!(before.starts_with("class,aeroplane,"));
}

#[test]
fn eval_reports_per_class_accuracy() {
    let tmp = TempDir::new().unwrap();
    let base = train(tmp.path(), "base", &[]);
    let report = tmp.path().join("report");
    ok(&with_small(&["eval", "--seed", "7", "--checkpoint", &path(&base, "head.json"), "--out-dir", &report.display().to_string()]));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("class,kind,count,correct,accuracy"));
    assert_eq!(csv.lines().count(), 17);
    // Novel test records are outside the base head's classes.
    assert_eq!(metadata(&report)["inputs"]["records_skipped"], 20);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["records"], 64);
}

#[test]
fn sweep_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        ok(&with_small(&["sweep", "--shots", "1,2", "--seeds", "2", "--set", "head.mode=\"ssp\"", "--set", "head.graph=\"none\"", "--out-dir", &dir.display().to_string()]));
        dir
    };
    let a = run("a");
    let b = run("b");
    let csv = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("k,seed,base_acc,novel_acc\n1,0,"));
    assert_eq!(csv, fs::read_to_string(b.join("sweep.csv")).unwrap());
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());

    for bad in [",", "0", "x"] {
        let out = semrel(&["sweep", "--shots", bad, "--out-dir", &path(tmp.path(), "bad")]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn gradcheck_reports_every_parameter() {
    for mode in ["baseline", "ssp", "srr"] {
        let out = ok(&["gradcheck", "--mode", mode]);
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("cls.bias"), "{text}");
        assert!(text.lines().last().unwrap().starts_with("PASS"));
    }
    let out = ok(&["gradcheck", "--mode", "srr", "--regression", "--decouple"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["relation.t_l", "reg_trunk.fc2.weight", "cls_trunk.fc1.bias", "reg.weight"] {
        assert!(text.contains(name), "{name} missing from {text}");
    }
    let out = semrel(&["gradcheck", "--threshold", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn closure_command() {
    let tmp = TempDir::new().unwrap();
    let edges = tmp.path().join("edges.tsv");
    fs::write(&edges, "# chain\nn00000001\tn00000002\nn00000002\tn00000003\n").unwrap();
    let e = edges.display().to_string();
    let out = ok(&["closure", "--edges", &e, "--roots", "n00000001", "--class", "chain"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "chain: n00000001, n00000002, n00000003\n");

    let out = ok(&["closure", "--edges", &e, "--roots", "n00000002", "--format", "json"]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["provenance"], "computed");
    assert_eq!(json["classes"]["roots"], serde_json::json!(["n00000002", "n00000003"]));

    let out = ok(&["closure", "--golden", "--only", "cow,horse"]);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "cow: n02403003, n02408429, n02410509\nhorse: n02389026, n02391049\n"
    );

    let out = semrel(&["closure", "--edges", &e, "--roots", "n00000009"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("n00000009"));

    fs::write(&edges, "n00000001\tn00000002\nbad line here\n").unwrap();
    let out = semrel(&["closure", "--edges", &e, "--roots", "n00000001"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}
