use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn drm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drm"))
        .args(args)
        .env_remove("DRM_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = drm(args);
    assert!(
        out.status.success(),
        "drm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small world with a 100-head basis built from it.
fn world(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let w = dir.join("world");
    ok(&[
        "gen",
        "--seed",
        "7",
        "--d",
        "64",
        "--k",
        "4",
        "--n",
        "300",
        "--out",
        s(&w),
    ]);
    let basis = dir.join("basis.drmb");
    let diffs = w.join("diffs.drme");
    ok(&[
        "pca",
        "--in",
        s(&diffs),
        "--heads",
        "50",
        "--out",
        s(&basis),
    ]);
    (diffs, basis)
}

#[test]
fn gen_writes_world_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("world");
    ok(&[
        "gen",
        "--seed",
        "7",
        "--d",
        "64",
        "--k",
        "4",
        "--n",
        "2500",
        "--out",
        s(&w),
    ]);
    for f in [
        "diffs.drme",
        "diffs.drme.meta.jsonl",
        "diffs.drme.config.json",
        "ground_truth.json",
    ] {
        assert!(w.join(f).exists(), "{f}");
    }
    let truth = json(&w.join("ground_truth.json"));
    assert_eq!(truth["directions"].as_array().unwrap().len(), 4);
    assert_eq!(truth["config"]["seed"], 7);
    assert_eq!(truth["config"]["args"]["n"], 2500);
    let header: Value =
        serde_json::from_slice(&ok(&["inspect", "--in", s(&w.join("diffs.drme"))]).stdout).unwrap();
    assert_eq!(header["header"]["d"], 64);
    assert_eq!(header["header"]["n"], 10_000);
    assert_eq!(header["header"]["mode"], "diffs");
}

#[test]
fn pca_then_eval_follow_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let (diffs, basis) = world(dir.path());
    let info: Value = serde_json::from_slice(&ok(&["inspect", "--in", s(&basis)]).stdout).unwrap();
    assert_eq!(info["n_heads"], 100);
    assert_eq!(info["source"], "pca");
    assert_eq!(info["has_spectrum"], true);

    let report = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    ok(&[
        "eval",
        "--basis",
        s(&basis),
        "--data",
        s(&diffs),
        "--n-adapt",
        "5",
        "--seeds",
        "20",
        "--out",
        s(&report),
        "--csv",
        s(&csv),
    ]);
    let r = json(&report);
    let attrs = r["per_attribute"].as_object().unwrap();
    assert_eq!(attrs.len(), 4);
    for a in attrs.values() {
        assert_eq!(a["per_seed"].as_array().unwrap().len(), 20);
    }
    assert_eq!(r["config"]["command"], "eval");
    assert_eq!(r["n_heads"], 100);
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(rows, 1 + 4 * 20 + 4 + 1);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (diffs, basis) = world(dir.path());
    let out = dir.path().join("report.json");
    let run = |threads: &str| {
        ok(&[
            "--threads",
            threads,
            "--seed",
            "3",
            "eval",
            "--basis",
            s(&basis),
            "--data",
            s(&diffs),
            "--out",
            s(&out),
        ]);
        std::fs::read(&out).unwrap()
    };
    let first = run("1");
    assert_eq!(first, run("1"));
    let mut a: Value = serde_json::from_slice(&first).unwrap();
    let mut b: Value = serde_json::from_slice(&run("4")).unwrap();
    // the echo records the thread count; everything else must agree
    a["config"]["threads"] = Value::Null;
    b["config"]["threads"] = Value::Null;
    assert_eq!(a, b);
    let basis2 = dir.path().join("basis2.drmb");
    ok(&[
        "pca",
        "--in",
        s(&diffs),
        "--heads",
        "50",
        "--out",
        s(&basis2),
    ]);
    assert_eq!(
        std::fs::read(&basis).unwrap(),
        std::fs::read(&basis2).unwrap()
    );
}

#[test]
fn exit_codes_distinguish_usage_from_pipeline_errors() {
    assert_eq!(drm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(drm(&["eval", "--no-such-flag"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.drme");
    let out = drm(&["inspect", "--in", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");

    let bad = dir.path().join("bad.drme");
    std::fs::write(&bad, b"NOPE....................").unwrap();
    let out = drm(&["inspect", "--in", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported format"));
}

#[test]
fn invalid_inputs_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (diffs, basis) = world(dir.path());
    let out = dir.path().join("never.json");
    let r = drm(&[
        "eval",
        "--basis",
        s(&basis),
        "--data",
        s(&diffs),
        "--n-adapt",
        "300",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("insufficient data"));
    assert!(!out.exists());

    let w = dir.path().join("bad_world");
    let r = drm(&["gen", "--d", "4", "--k", "5", "--out", s(&w)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!w.exists());
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let (diffs, basis) = world(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 11, "n_adapt": 10, "seeds": 3, "norm_mode": "z_score"}"#,
    )
    .unwrap();
    let out = dir.path().join("r.json");
    ok(&[
        "--config",
        s(&cfg),
        "eval",
        "--basis",
        s(&basis),
        "--data",
        s(&diffs),
        "--seeds",
        "2",
        "--out",
        s(&out),
    ]);
    let r = json(&out);
    assert_eq!(r["protocol"]["n_adapt"], 10);
    assert_eq!(r["protocol"]["n_seeds"], 2);
    assert_eq!(r["protocol"]["seed"], 11);
    assert_eq!(r["protocol"]["adapt"]["norm_mode"], "z_score");
    assert_eq!(r["config"]["args"]["seeds"], 2);
}

#[test]
fn baselines_and_analysis_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (diffs, basis) = world(dir.path());
    let d = dir.path();

    let single = d.join("single.drmb");
    ok(&[
        "train-single",
        "--in",
        s(&diffs),
        "--epochs",
        "2",
        "--out",
        s(&single),
    ]);
    let echo = json(&d.join("single.drmb.config.json"));
    assert_eq!(echo["loss_curve"].as_array().unwrap().len(), 2);
    assert!(echo["train_accuracy"].as_f64().unwrap() > 0.5);

    let random = d.join("random.drmb");
    ok(&[
        "random-heads",
        "--d",
        "64",
        "--count",
        "100",
        "--dist",
        "uniform",
        "--out",
        s(&random),
    ]);
    let info: Value = serde_json::from_slice(&ok(&["inspect", "--in", s(&random)]).stdout).unwrap();
    assert_eq!(info["source"], "random_uniform");
    assert_eq!(info["n_heads"], 100);

    let adapted = d.join("adapt.json");
    ok(&[
        "adapt",
        "--basis",
        s(&basis),
        "--data",
        s(&diffs),
        "--attribute",
        "attr_0",
        "--n-adapt",
        "5",
        "--out",
        s(&adapted),
    ]);
    let a = json(&adapted);
    assert_eq!(a["result"]["weights"].as_array().unwrap().len(), 100);
    assert_eq!(a["n_holdout"], 295);
    assert!(a["holdout_accuracy"].as_f64().unwrap() > 0.5);

    let per_head = d.join("per_head.json");
    ok(&[
        "per-head",
        "--basis",
        s(&basis),
        "--data",
        s(&diffs),
        "--out",
        s(&per_head),
        "--csv",
        s(&d.join("per_head.csv")),
    ]);
    assert_eq!(json(&per_head)["rows"].as_array().unwrap().len(), 400);

    let grid = d.join("grid.json");
    ok(&[
        "ablate",
        "--basis",
        s(&basis),
        "--data",
        s(&diffs),
        "--n-values",
        "3,5",
        "--h-values",
        "10,100",
        "--seeds",
        "4",
        "--out",
        s(&grid),
    ]);
    assert_eq!(json(&grid)["cells"].as_array().unwrap().len(), 4);

    let analysis = d.join("analysis");
    ok(&[
        "analyze",
        "--basis",
        s(&basis),
        "--data",
        s(&diffs),
        "--seeds",
        "4",
        "--out",
        s(&analysis),
    ]);
    for f in [
        "variance.csv",
        "correlation.csv",
        "head_stats.csv",
        "analysis.json",
    ] {
        assert!(analysis.join(f).exists(), "{f}");
    }
    for a in 0..4 {
        let rows = std::fs::read_to_string(analysis.join(format!("weights_attr_{a}.csv"))).unwrap();
        assert_eq!(rows.lines().count(), 101);
    }
    let summary = json(&analysis.join("analysis.json"));
    assert_eq!(summary["correlation"][0][0], 1.0);
}

#[test]
fn pair_files_convert_and_feed_the_pipeline() {
    use drm_core::dataio::{write_pairs, Metadata, PairDataset, PairRecord, Split};
    let dir = tempfile::tempdir().unwrap();
    let pairs_path = dir.path().join("pairs.drme");
    let d = 8;
    let mut pairs = Vec::new();
    let mut meta = Vec::new();
    for i in 0..60 {
        let rejected: Vec<f32> = (0..d)
            .map(|j| ((i * 7 + j * 3) % 11) as f32 * 0.1)
            .collect();
        let mut chosen = rejected.clone();
        chosen[i % 2] += 1.0 + (i % 5) as f32 * 0.1;
        pairs.push(PairRecord::new(chosen, rejected));
        meta.push(Metadata::new(
            format!("p{i}"),
            format!("attr_{}", i % 2),
            Split::Test,
        ));
    }
    // identical texts embed identically and must give a zero diff
    pairs.push(PairRecord::new(vec![0.5; d], vec![0.5; d]));
    meta.push(Metadata::new("same", "attr_0", Split::Test));
    write_pairs(
        &PairDataset::new(d, pairs, Some(meta)).unwrap(),
        &pairs_path,
    )
    .unwrap();

    let info: Value =
        serde_json::from_slice(&ok(&["inspect", "--in", s(&pairs_path)]).stdout).unwrap();
    assert_eq!(info["header"]["mode"], "pairs");
    assert_eq!(info["header"]["d"], 8);

    let diffs = dir.path().join("diffs.drme");
    ok(&["convert", "--in", s(&pairs_path), "--out", s(&diffs)]);
    let converted = drm_core::dataio::read_diffs(&diffs).unwrap();
    assert_eq!(converted.len(), 61);
    assert!(converted.record(60).iter().all(|&x| x == 0.0));
    assert_eq!(
        drm(&[
            "convert",
            "--in",
            s(&diffs),
            "--out",
            s(&dir.path().join("x.drme"))
        ])
        .status
        .code(),
        Some(1)
    );

    let basis = dir.path().join("b.drmb");
    ok(&[
        "pca",
        "--in",
        s(&pairs_path),
        "--heads",
        "4",
        "--out",
        s(&basis),
    ]);
    let report = dir.path().join("r.json");
    ok(&[
        "eval",
        "--basis",
        s(&basis),
        "--data",
        s(&pairs_path),
        "--out",
        s(&report),
    ]);
    assert_eq!(json(&report)["per_attribute"].as_object().unwrap().len(), 2);
}
