use std::path::Path;

use mvlift::cli::{cli_main, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use mvlift::dataio::load_dataset;
use mvlift::eval::{EvalReport, JointCell};

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("mvlift").chain(args.iter().copied()))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]), EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["eval", "--data", "d.jsonl", "--report", "r.json"]), EXIT_USAGE);
    assert_eq!(run(&["train", "--mode", "sideways", "--data", "d", "--out", "o"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["triangulate", "--data", &p(dir.path(), "missing.jsonl"), "--out", &p(dir.path(), "o.jsonl")]), EXIT_DATA);
    std::fs::write(dir.path().join("bad.jsonl"), "{\"seq\": 1}\n").unwrap();
    assert_eq!(run(&["triangulate", "--data", &p(dir.path(), "bad.jsonl"), "--out", &p(dir.path(), "o.jsonl")]), EXIT_DATA);
    assert_eq!(run(&["synth", "--frames", "0", "--out", &p(dir.path(), "s.jsonl")]), EXIT_DATA);
}

#[test]
fn gradcheck_passes() {
    assert_eq!(run(&["gradcheck", "--seed", "7"]), EXIT_OK);
}

#[test]
fn synth_triangulate_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (raw, tri, model, report) = (p(d, "raw.jsonl"), p(d, "tri.jsonl"), p(d, "model.json"), p(d, "report.json"));
    assert_eq!(run(&["synth", "--frames", "200", "--cams", "4", "--seed", "3", "--out", &raw]), EXIT_OK);
    assert_eq!(load_dataset(&raw).unwrap().len(), 200);

    let residuals = p(d, "residuals.json");
    assert_eq!(run(&["triangulate", "--data", &raw, "--out", &tri, "--report", &residuals]), EXIT_OK);
    let frames = load_dataset(&tri).unwrap();
    assert!(frames.iter().all(|f| f.gt3d.is_some()));
    let res: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&residuals).unwrap()).unwrap();
    assert_eq!(res["frames"], 200);
    assert!(res["per_joint_rms_px"]["Nose"].as_f64().unwrap() < 1e-6);

    let config = p(d, "config.json");
    std::fs::write(&config, r#"{"epochs": 3, "hidden_dim": 32, "dropout": 0.0}"#).unwrap();
    let history = p(d, "history.csv");
    assert_eq!(
        run(&["train", "--mode", "strong", "--data", &tri, "--config", &config, "--out", &model, "--history", &history]),
        EXIT_OK
    );
    let csv = std::fs::read_to_string(&history).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,lr,proj,train_total,train_LM,train_LR,val_metric");
    assert_eq!(csv.lines().count(), 4);

    assert_eq!(run(&["eval", "--model", &model, "--data", &tri, "--report", &report, "--split", "test", "--table"]), EXIT_OK);
    let rep = EvalReport::load(&report).unwrap();
    assert!(rep.avg_mm.is_finite() && rep.n_samples > 0);
    assert_eq!(rep.per_joint_mm["Neck"], JointCell::DASH);

    // Same model and data give the same report.
    let again = p(d, "again.json");
    assert_eq!(run(&["eval", "--model", &model, "--data", &tri, "--report", &again, "--split", "test"]), EXIT_OK);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&again).unwrap());
}
