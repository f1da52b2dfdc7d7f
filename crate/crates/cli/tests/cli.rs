use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infofocus"))
        .args(args)
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_kind(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let v: Value =
        serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&out.stderr)));
    assert!(v["error"].as_str().is_some_and(|s| !s.is_empty()));
    v["kind"].as_str().unwrap().to_string()
}

const SPEC: &str =
    "num_objects_min = 1\nnum_objects_max = 3\n[region]\nx_min = 0.0\nx_max = 16.0\ny_min = -8.0\ny_max = 8.0\n";

const CONFIG: &str = "[grid]\nx_min = 0.0\nx_max = 16.0\ny_min = -8.0\ny_max = 8.0\n\
[model]\nbackbone_channels = [8]\npfn_channels = 8\nfc_width = 16\n\
[proposals]\npre_nms = 100\npost_nms = 20\n\
[train]\nepochs = 1\n\
[data.scenes]\nnum_objects_min = 1\nnum_objects_max = 2\n\
[data.scenes.region]\nx_min = 0.0\nx_max = 16.0\ny_min = -8.0\ny_max = 8.0\n";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_infer_eval_bench_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();
    std::fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    let (train, val, run_dir) = (d.join("data/train"), d.join("data/val"), d.join("run"));

    let v = ok_json(&[
        "synth-gen",
        "--spec",
        s(&d.join("spec.toml")),
        "--count",
        "4",
        "--seed",
        "5",
        "--out",
        s(&train),
    ]);
    assert_eq!(v["scenes"], 4);
    ok_json(&[
        "synth-gen",
        "--spec",
        s(&d.join("spec.toml")),
        "--count",
        "2",
        "--seed",
        "50",
        "--out",
        s(&val),
    ]);

    let v = ok_json(&[
        "train",
        "--config",
        s(&d.join("cfg.toml")),
        "--data",
        s(&d.join("data")),
        "--out",
        s(&run_dir),
    ]);
    assert_eq!(v["epochs"], 1);
    for f in ["model.ckpt", "config.toml", "train_log.jsonl"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["val_map"].is_number());

    let ckpt = run_dir.join("model.ckpt");
    let dets = d.join("dets.jsonl");
    let v = ok_json(&["infer", "--ckpt", s(&ckpt), "--data", s(&val), "--out", s(&dets)]);
    assert_eq!(v["scenes"], 2);
    assert_eq!(std::fs::read_to_string(&dets).unwrap().lines().count(), 2);
    ok_json(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&val),
        "--out",
        s(&d.join("base.jsonl")),
        "--baseline",
    ]);

    let report = d.join("report.json");
    let v = ok_json(&["eval", "--dets", s(&dets), "--gts", s(&val), "--out", s(&report)]);
    let map = v["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(written["map"].as_f64().unwrap(), map);
    assert_eq!(written["cells"].as_array().unwrap().len(), 4);

    let v = ok_json(&["bench", "--ckpt", s(&ckpt), "--data", s(&val), "--repeats", "2"]);
    assert_eq!(v["stages_ms"].as_object().unwrap().len(), 6);
    assert_eq!(v["repeats"], 2);

    let csv = d.join("stats.csv");
    let v = ok_json(&["stats", "--data", s(&train), "--out", s(&csv)]);
    assert!(v["objects"].as_u64().unwrap() > 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("E1,E2,E3,E4,others,objects\n"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn ablate_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!("{CONFIG}[data]\ntrain_count = 2\nval_count = 2\n");
    std::fs::write(d.join("cfg.toml"), cfg).unwrap();
    std::fs::write(d.join("grid.toml"), "seeds = [0]\n[[rows]]\npoi_pool = true\nvisibility = true\nadaptive = true\nsecond_stage = true\nrroi = \"off\"\n").unwrap();
    let out = d.join("table.csv");
    let v = ok_json(&[
        "ablate",
        "--config",
        s(&d.join("cfg.toml")),
        "--grid",
        s(&d.join("grid.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("poi_pool+vis+adp,"));
}

#[test]
fn gradcheck_reports_every_check() {
    let v = ok_json(&["gradcheck", "--configs", "2"]);
    let checks = v["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["name"] == "two_stage_loss"));
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn failures_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        err_kind(&["train", "--data", s(&d.join("missing")), "--out", s(&d.join("o"))]),
        "invalid_argument"
    );
    std::fs::write(d.join("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    assert_eq!(
        err_kind(&[
            "train",
            "--config",
            s(&d.join("bad.toml")),
            "--data",
            s(d),
            "--out",
            s(&d.join("o"))
        ]),
        "config"
    );
    assert_eq!(
        err_kind(&[
            "infer",
            "--ckpt",
            s(&d.join("none.ckpt")),
            "--data",
            s(d),
            "--out",
            s(&d.join("x"))
        ]),
        "io"
    );
    std::fs::write(d.join("grid.toml"), "seeds = [0]\n[[rows]]\nvisibility = true\npoi_pool = false\nadaptive = false\nsecond_stage = true\nrroi = \"off\"\n").unwrap();
    assert_eq!(
        err_kind(&[
            "ablate",
            "--grid",
            s(&d.join("grid.toml")),
            "--out",
            s(&d.join("t.csv"))
        ]),
        "invalid_switches"
    );
    std::fs::write(d.join("dets.jsonl"), "not json\n").unwrap();
    let kind = err_kind(&[
        "eval",
        "--dets",
        s(&d.join("dets.jsonl")),
        "--gts",
        s(d),
        "--out",
        s(&d.join("r.json")),
    ]);
    assert!(kind == "json" || kind == "format", "{kind}");
    assert_eq!(err_kind(&["bench", "--ckpt"]), "usage");
    assert_eq!(err_kind(&["no-such-command"]), "usage");
}
