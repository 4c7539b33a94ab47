use std::path::{Path, PathBuf};

use wsod_cli::run;

fn wsod(args: &[&str]) -> i32 {
    run(std::iter::once("wsod").chain(args.iter().copied()))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "data": {
            "root": dir.join("data"),
            "num_train": 4,
            "num_test": 2,
            "scene": { "width": 64, "height": 64, "min_size": 12.0, "max_size": 20.0 },
            "proposals": { "random_count": 6, "jitter_per_object": 3 }
        },
        "train": {
            "iterations": 3,
            "log_every": 1,
            "model": {
                "backbone_channels": [4, 8, 8, 8],
                "roi_size": 3,
                "hidden": 16,
                "embed_hidden": 16,
                "embed_dim": 8,
                "dropblock_size": 2
            }
        }
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    assert_eq!(wsod(&["eval", "--help"]), 0);
    assert_eq!(wsod(&["--help"]), 0);
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(wsod(&["train", "--config", s(&missing)]), 1);
    assert_eq!(wsod(&["frobnicate"]), 1);
    assert_eq!(wsod(&["train", "--set", "train.no_such_key=1"]), 1);
    assert_eq!(wsod(&["train", "--set", "train.lr=-1"]), 1);
    assert_eq!(wsod(&["analyze-coverage"]), 1);
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    // no data generated yet
    assert_eq!(wsod(&["train", "--config", s(&cfg), "--out", s(&out)]), 2);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(wsod(&["gradcheck", "--out", s(dir.path())]), 0);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn pipeline_end_to_end_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = s(&cfg);
    assert_eq!(wsod(&["generate-data", "--config", c]), 0);
    assert!(dir.path().join("data/train/manifest.json").exists());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(
        wsod(&["train", "--config", c, "--out", s(&a), "--eval-every", "3"]),
        0
    );
    assert_eq!(wsod(&["train", "--config", c, "--out", s(&b)]), 0);
    let ca = std::fs::read(a.join("checkpoint.bin")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("checkpoint.bin")).unwrap());
    assert_eq!(
        std::fs::read(a.join("config.json")).unwrap(),
        std::fs::read(b.join("config.json")).unwrap()
    );
    let metrics = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines[0].get("config_hash").is_some());
    assert!(lines.iter().any(|l| l.get("eval").is_some()));
    // apart from the timestamped header, the logs agree
    let rest = |p: &Path| {
        std::fs::read_to_string(p.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .skip(1)
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let (ra, rb) = (rest(&a), rest(&b));
    assert!(rb.iter().all(|l| ra.contains(l)));

    assert_eq!(wsod(&["infer", "--config", c, "--out", s(&a)]), 0);
    assert_eq!(wsod(&["eval", "--config", c, "--out", s(&a)]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    assert!(report["map"].as_f64().unwrap() >= 0.0);

    assert_eq!(wsod(&["discover", "--config", c, "--out", s(&a)]), 0);
    let dump = a.join("discoveries.json");
    let records: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 4);
    assert_eq!(
        wsod(&[
            "analyze-coverage",
            "--config",
            c,
            "--out",
            s(&a),
            "--dump",
            s(&dump)
        ]),
        0
    );
    assert!(a.join("coverage.json").exists());

    // a checkpoint for a different class count is rejected
    assert_eq!(
        wsod(&[
            "infer",
            "--config",
            c,
            "--out",
            s(&a),
            "--set",
            "data.scene.num_categories=2",
            "--set",
            "train.model.num_classes=2"
        ]),
        1
    );
}

#[test]
fn voc_coverage_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let voc = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/voc");
    assert_eq!(
        wsod(&["analyze-coverage", "--voc", s(&voc), "--out", s(dir.path())]),
        0
    );
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("coverage.json")).unwrap())
            .unwrap();
    assert_eq!(reports[0]["overall"]["selected"], 20);
    assert_eq!(reports[0]["overall"]["total"], 30);
    assert_eq!(reports[1]["overall"]["total"], 32);
}
