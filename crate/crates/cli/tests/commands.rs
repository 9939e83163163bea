use std::path::Path;
use std::process::{Command, Output};

use eit_core::ensemble::{write_labels_csv, PredictionSet};

fn eit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eit"))
        .arg("--out")
        .arg(out)
        .args(["--threads", "1"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr_of(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", stderr_of(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn single_member_vote_matches_unit_weight() {
    let dir = tempfile::tempdir().unwrap();
    let probs = vec![vec![
        [0.1, 0.6, 0.1, 0.1, 0.1],
        [0.3, 0.3, 0.2, 0.1, 0.1],
        [0.0, 0.0, 0.1, 0.2, 0.7],
        [0.2, 0.2, 0.2, 0.2, 0.2],
    ]];
    let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
    let set = PredictionSet::new(ids.clone(), vec!["only".into()], probs).unwrap();
    let preds = dir.path().join("preds.csv");
    let labels = dir.path().join("labels.csv");
    set.write_csv(&preds).unwrap();
    write_labels_csv(&labels, &ids.iter().cloned().zip([1, 0, 4, 2]).collect::<Vec<_>>()).unwrap();

    let vote = dir.path().join("vote");
    let weighted = dir.path().join("weighted");
    ok(eit(&vote, &["ensemble", "--preds", s(&preds), "--labels", s(&labels), "--vote"]));
    ok(eit(&weighted, &["ensemble", "--preds", s(&preds), "--labels", s(&labels), "--alpha", "1.0"]));
    let a = std::fs::read_to_string(vote.join("ensemble_predictions.csv")).unwrap();
    let b = std::fs::read_to_string(weighted.join("ensemble_predictions.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, "sample_id,label\ns0,1\ns1,0\ns2,4\ns3,0\n");
}

#[test]
fn sweep_heads_writes_one_row_per_head_count() {
    let dir = tempfile::tempdir().unwrap();
    ok(eit(
        dir.path(),
        &["--set", "n_per_class=10", "sweep-heads", "--heads", "2,4,6", "--variant", "vit", "--epochs", "1"],
    ));
    let csv = std::fs::read_to_string(dir.path().join("sweep_heads.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{csv}");
    let widths: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    // width rounded up to a multiple of the head count
    assert_eq!(widths, ["64", "64", "66"]);
}

#[test]
fn commands_chain_through_a_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(eit(&data, &["synth", "--n-per-class", "10"]));
    assert!(data.join("labels.csv").exists() && data.join("split.json").exists());

    let models = dir.path().join("models");
    ok(eit(&models, &["train", "--data", s(&data), "--variant", "vit,cait", "--epochs", "1"]));
    let vit = models.join("vit.ckpt");
    let cait = models.join("cait.ckpt");
    assert!(vit.exists() && cait.exists());

    let eval = dir.path().join("eval");
    ok(eit(&eval, &["eval", "--ckpt", s(&vit), "--data", s(&data)]));
    let report = std::fs::read_to_string(eval.join("eval.txt")).unwrap();
    assert!(report.starts_with("# eit eval"), "{report}");

    let preds = dir.path().join("preds");
    ok(eit(&preds, &["predict", "--ckpt", s(&vit), "--ckpt", s(&cait), "--data", s(&data), "--split", "val"]));
    let grid = dir.path().join("grid");
    ok(eit(
        &grid,
        &[
            "gridsearch",
            "--preds",
            s(&preds.join("preds.csv")),
            "--labels",
            s(&preds.join("labels.csv")),
            "--step",
            "0.25",
        ],
    ));
    let alpha: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(grid.join("alpha.json")).unwrap()).unwrap();
    assert_eq!(alpha["evaluated"], 5);

    let cam = dir.path().join("cam");
    let image = data.join("images/synth_4_0000.png");
    ok(eit(&cam, &["gradcam", "--ckpt", s(&vit), "--image", s(&image), "--class", "4"]));
    assert!(cam.join("gradcam.png").exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cam.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gradcam");
}

fn assert_one_line_error(o: &Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr_of(o));
    let err = stderr_of(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: kind={kind} message=")), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_one_line_error(&eit(dir.path(), &["train", "--bogus"]), 2, "usage");
    assert_one_line_error(&eit(dir.path(), &["--set", "no_such_key=1", "synth"]), 2, "usage");
    assert_one_line_error(&eit(dir.path(), &["--set", "epochs=\"many\"", "synth"]), 2, "usage");
    assert_one_line_error(&eit(dir.path(), &["--preset", "huge", "synth"]), 2, "usage");
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = eit(&dir.path().join("out"), &["eval", "--ckpt", s(&missing)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr_of(&o));
    let err = stderr_of(&o);
    assert_eq!(err.lines().filter(|l| l.starts_with("error:")).count(), 1, "{err}");
    assert!(err.contains("missing.ckpt"), "{err}");
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nn_per_class = 10\nseed = 5\n").unwrap();
    let out = dir.path().join("out");
    ok(eit(&out, &["--config", s(&cfg), "--seed", "6", "synth"]));
    let report = std::fs::read_to_string(out.join("synth.txt")).unwrap();
    assert!(report.contains("# seed = 6"), "{report}");
    assert!(report.contains("# n_per_class = 10"), "{report}");
}
