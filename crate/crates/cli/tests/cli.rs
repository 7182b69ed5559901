use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn hsbnn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsbnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("HSBNN_REPORT_DIR")
        .output()
        .expect("binary runs")
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schema").join(name);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&v).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

const SMALL: &str = r#"
version = 1
name = "small"
seed = 4
replications = 2
n_train = 40
n_test = 30
hidden_widths = [6]
iterations = 40
eval_samples = 10
norm_samples = 10
fine_tune_iterations = 5
"#;

#[test]
fn train_writes_reports_that_match_the_schemas() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let out = hsbnn(&["train", "--config", "small.toml", "--report-dir", "out", "--save-model"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = schema("run_report.schema.json");
    for r in 0..2 {
        let doc = read_json(&dir.path().join(format!("out/small_rep{r:03}.json")));
        assert_valid(&run, &doc);
        assert_eq!(doc["seed"], 4 + r);
        assert!(dir.path().join(format!("out/small_rep{r:03}_model.json")).exists());
    }
    let agg = read_json(&dir.path().join("out/small_aggregate.json"));
    assert_valid(&schema("aggregate_report.schema.json"), &agg);
    assert_eq!(agg["succeeded"], 2);
}

#[test]
fn report_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL.replace("replications = 2", "replications = 1")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hsbnn"))
        .args(["train", "--config", "small.toml", "--iterations", "5"])
        .current_dir(dir.path())
        .env("HSBNN_REPORT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = read_json(&dir.path().join("from-env/small_rep000.json"));
    assert_eq!(doc["config"]["iterations"], 5);
}

#[test]
fn saved_model_can_be_evaluated_and_pruned() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("small.toml"), SMALL.replace("replications = 2", "replications = 1")).unwrap();
    assert!(hsbnn(&["train", "--config", "small.toml", "--report-dir", "out", "--save-model"], p).status.success());
    assert!(hsbnn(&["toy-gen", "--n", "25", "--seed", "9", "--out", "test.csv"], p).status.success());

    let out = hsbnn(
        &["evaluate", "--model", "out/small_rep000_model.json", "--data", "test.csv", "--header", "--bands", "bands.csv", "--grid-points", "11"],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["rmse"].as_f64().unwrap().is_finite());
    let bands = std::fs::read_to_string(p.join("bands.csv")).unwrap();
    assert_eq!(bands.lines().count(), 12);
    assert!(bands.starts_with("x,mean,lower,upper"));

    let out = hsbnn(
        &["prune", "--model", "out/small_rep000_model.json", "--delta", "10", "--p0", "0.5", "--out", "pruned.json"],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(p.join("pruned.json").exists());
    let out = hsbnn(&["evaluate", "--model", "pruned.json", "--data", "test.csv", "--header"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prior_samples_and_gradient_check_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = hsbnn(&["prior-samples", "--widths", "20", "--count", "2", "--grid-points", "5", "--out", "draws.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("draws.csv").exists());

    for family in ["factorized", "factorized_tied", "semi_structured", "structured"] {
        let out = hsbnn(&["check-gradients", "--family", family], dir.path());
        assert!(out.status.success(), "{family}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    let missing = hsbnn(&["train", "--config", "nope.toml"], p);
    assert_eq!(missing.status.code(), Some(2));

    std::fs::write(p.join("unknown.toml"), "version = 1\nlearning_rat = 0.1\n").unwrap();
    assert_eq!(hsbnn(&["train", "--config", "unknown.toml"], p).status.code(), Some(2));

    std::fs::write(p.join("future.toml"), "version = 99\n").unwrap();
    assert_eq!(hsbnn(&["train", "--config", "future.toml"], p).status.code(), Some(2));

    std::fs::write(p.join("bad.csv"), "1,2\n3,oops\n").unwrap();
    std::fs::write(p.join("file.toml"), "version = 1\ndata = \"file\"\ndata_path = \"bad.csv\"\n").unwrap();
    let out = hsbnn(&["train", "--config", "file.toml", "--report-dir", "out"], p);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = read_json(&p.join("out/run_rep000.json"));
    assert_eq!(doc["failure"]["stage"], "ingest");
    assert_eq!(doc["failure"]["kind"], "data");
    assert_valid(&schema("run_report.schema.json"), &doc);
}
