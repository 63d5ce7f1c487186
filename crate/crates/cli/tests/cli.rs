use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tagground"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tagground")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"clips": 80, "test_clips": 30, "seed": 4}"#;

#[test]
fn every_subcommand_has_help() {
    ok(&["--help"]);
    for sub in ["gen-data", "sample", "train", "infer", "eval", "curves", "pipeline", "compare"] {
        let text = ok(&[sub, "--help"]);
        assert!(text.contains("Usage"), "{sub}");
    }
}

#[test]
fn stage_by_stage_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(data.join("train.jsonl").exists());
    assert!(data.join("test.jsonl").exists());

    let first = std::fs::read_to_string(data.join("train.jsonl")).unwrap();
    let id: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let clip = id["clip_id"].as_str().expect("clip_id field").to_string();
    let batch: serde_json::Value = serde_json::from_str(&ok(&[
        "sample", "--data", s(&data), "--split", "train", "--clip", &clip, "--strategy", "clustering",
        "--n", "8", "--clusters", "6",
    ]))
    .unwrap();
    assert_eq!(batch["phrases"].as_array().unwrap().len(), 8);

    let model = dir.path().join("model.ckpt");
    ok(&[
        "train", "--data", s(&data), "--out", s(&model), "--epochs", "2", "--validation-count", "20",
        "--strategy", "random", "--n", "8",
    ]);
    let pred = dir.path().join("pred.jsonl");
    ok(&["infer", "--model", s(&model), "--data", s(&data), "--out", s(&pred)]);
    let csv = dir.path().join("m.csv");
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--pred", s(&pred), "--data", s(&data), "--csv", s(&csv)])).unwrap();
    let p = report["psds_whole"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&p));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() == 2);

    let curves = dir.path().join("curves");
    ok(&["curves", "--pred", s(&pred), "--data", s(&data), "--out", s(&curves)]);
    assert!(std::fs::read_dir(&curves).unwrap().count() >= 4);
}

#[test]
fn pipeline_runs_and_compare_ranks_them() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for strategy in ["random", "clustering"] {
        let cfg = dir.path().join(format!("{strategy}.json"));
        let text = format!(
            r#"{{"data": {{"synth": {SMALL}, "validation_count": 20}},
                "train": {{"max_epochs": 2}},
                "sampling": {{"strategy": "{strategy}", "n": 8, "clusters": 6}}}}"#
        );
        std::fs::write(&cfg, text).unwrap();
        let out = dir.path().join(strategy);
        ok(&["pipeline", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
        assert!(out.join("metrics.json").exists());
        runs.push(out);
    }
    let csv = dir.path().join("cmp.csv");
    let table = ok(&["compare", s(&runs[0]), s(&runs[1]), "--csv", s(&csv)]);
    assert!(table.contains("random") && table.contains("clustering"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = run(&["pipeline", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn invalid_values_and_missing_files_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);

    let missing = dir.path().join("nope.jsonl");
    let out = run(&["eval", "--pred", s(&missing), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));

    let pred = dir.path().join("p.jsonl");
    std::fs::write(&pred, "").unwrap();
    let out = run(&["eval", "--pred", s(&pred), "--data", s(&data), "--rho", "1.5"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["compare", s(&dir.path().join("no_run"))]);
    assert_eq!(out.status.code(), Some(3));
}
