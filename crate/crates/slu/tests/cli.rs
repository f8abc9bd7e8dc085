use std::path::Path;
use std::process::Command;

fn slu(cache: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_slu"))
        .arg("--cache")
        .arg(cache)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const EXPERIMENT: &str = r#"
name = "toy-e2e"
pipeline = "e2e"

[data]
am_pretrain = { manifest = "pretrain.jsonl", seed = 7 }
s2i = { manifest = "train.jsonl" }
test = { manifest = "test.jsonl" }

[model]
embedding_dim = 16

[model.encoder]
stack = 3
layers = 1
hidden_per_direction = 16

[train.am]
epochs = 1

[train.s2i.train]
epochs = 2
"#;

#[test]
fn toy_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cache) = (dir.path().join("toy"), dir.path().join("cache"));
    let out = slu(&cache, &["prepare", "--toy", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("matrix.toml").exists());

    let exp = data.join("toy.toml");
    std::fs::write(&exp, EXPERIMENT).unwrap();
    let out = slu(&cache, &["train-s2i", exp.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = text(&out).trim().to_string();
    assert!(Path::new(&model).exists(), "{model}");
    assert!(Path::new(&model).with_file_name("last-epoch.json").exists());

    let out = slu(&cache, &["eval", exp.to_str().unwrap(), "--seed", "2"]);
    assert!(out.status.success());
    let row: serde_json::Value = serde_json::from_str(&text(&out)).unwrap();
    assert_eq!(row["status"], "ok");
    assert_eq!(row["seed"], 2);
    assert_eq!(row["counts"]["test"], 20);
    let run = cache.join("runs").join("toy-e2e-seed2");
    let preds = std::fs::read_to_string(run.join("predictions.tsv")).unwrap();
    assert_eq!(preds.lines().count(), 20);
    assert_eq!(preds.lines().next().unwrap().split('\t').count(), 3);

    // A second evaluation is served entirely from the cache.
    let again = slu(&cache, &["eval", exp.to_str().unwrap(), "--seed", "2"]);
    let row2: serde_json::Value = serde_json::from_str(&text(&again)).unwrap();
    assert_eq!(row["intent_accuracy"], row2["intent_accuracy"]);
}

#[test]
fn matrix_reports_failures_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cache) = (dir.path().join("toy"), dir.path().join("cache"));
    assert!(slu(&cache, &["prepare", "--toy", "--out", data.to_str().unwrap()]).status.success());
    let matrix = r#"
seeds = [1]

[defaults]
pipeline = "e2e"
data.am_pretrain = { manifest = "pretrain.jsonl", seed = 7 }
data.test = { manifest = "test.jsonl" }
model.embedding_dim = 16
model.encoder = { stack = 3, layers = 1, hidden_per_direction = 16 }
train.am.epochs = 1
train.s2i.train.epochs = 2

[[experiment]]
name = "toy-e2e"
data.s2i = { manifest = "train.jsonl" }

[[experiment]]
name = "broken"
data.s2i = { manifest = "missing.jsonl" }
"#;
    let m = data.join("m.toml");
    std::fs::write(&m, matrix).unwrap();
    let out = slu(&cache, &["matrix", m.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success(), "a failed row must fail the run");
    let report = text(&out);
    assert!(report.contains("toy-e2e"), "{report}");
    assert!(report.contains("failed in"), "{report}");

    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let rows = metrics["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["status"], "ok");
    assert_eq!(rows[1]["status"], "failed");

    let printed = slu(&cache, &["report", dir.path().join("metrics.json").to_str().unwrap()]);
    assert_eq!(text(&printed), std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap());
}
