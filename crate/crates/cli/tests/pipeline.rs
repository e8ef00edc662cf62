use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hmogp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmogp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = hmogp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"
seed = 3

[dataset.synthetic]
outputs = 3
replicas = 2
points_per_replica = 8

[model]
inducing = { per_replica = 4 }

[optimizer]
iterations = 150

[prediction]
mc_samples = 200

[experiment]
repeats = 2
"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("gen");
    run_ok(&["generate", "--config", &cfg, "--out", s(&out)]);
    for f in ["data.csv", "data.meta.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let text = fs::read_to_string(out.join("data.csv")).unwrap();
    assert!(text.starts_with("output,replica,x_0,y\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 8);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"][0]["run"], 3);
}

#[test]
fn eval_of_perfect_predictions_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let gen = dir.path().join("gen");
    run_ok(&["generate", "--config", &cfg, "--out", s(&gen)]);
    let data = fs::read_to_string(gen.join("data.csv")).unwrap();
    let mut preds = String::from("output,replica,x_0,mean,variance\n");
    for line in data.lines().skip(1) {
        preds.push_str(&format!("{line},0.5\n"));
    }
    let pp = dir.path().join("perfect.csv");
    fs::write(&pp, preds).unwrap();
    let out = dir.path().join("eval");
    run_ok(&["eval", "--predictions", s(&pp), "--truth", s(&gen.join("data.csv")), "--out", s(&out)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["nmse"], 0.0);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("scope,output,n_test,nmse,nlpd\n"));
}

#[test]
fn fit_then_predict_is_calibrated_at_training_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        r#"
seed = 11

[dataset.synthetic]
outputs = 3
replicas = 2
points_per_replica = 10
noise = 0.0001

[model]
inducing = { per_replica = 6 }

[optimizer]
iterations = 1500

[split]
mode = "none"

[prediction]
mc_samples = 500
"#,
    );
    let fit = dir.path().join("fit");
    run_ok(&["fit", "--config", &cfg, "--out", s(&fit)]);
    for f in ["model.json", "trace.csv", "train.csv", "manifest.json"] {
        assert!(fit.join(f).exists(), "{f} missing");
    }
    let pred = dir.path().join("pred");
    run_ok(&[
        "predict",
        "--config",
        &cfg,
        "--model",
        s(&fit.join("model.json")),
        "--points",
        s(&fit.join("train.csv")),
        "--out",
        s(&pred),
    ]);
    let truth: Vec<f64> = fs::read_to_string(fit.join("train.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    let rows: Vec<(f64, f64)> = fs::read_to_string(pred.join("predictions.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[f.len() - 2], f[f.len() - 1])
        })
        .collect();
    assert_eq!(rows.len(), truth.len());
    let inside = rows
        .iter()
        .zip(&truth)
        .filter(|((m, v), y)| (*y - m).abs() < 3.0 * v.sqrt())
        .count();
    assert!(inside as f64 >= 0.95 * truth.len() as f64, "{inside} of {}", truth.len());
}

#[test]
fn experiment_summarises_repeats_and_runs_the_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("exp");
    run_ok(&["experiment", "--config", &cfg, "--out", s(&out)]);
    let sum: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(sum["repeats"].as_array().unwrap().len(), 2);
    assert_eq!(sum["flat"], false);
    let nmse: Vec<f64> = sum["repeats"].as_array().unwrap().iter().map(|r| r["report"]["nmse"].as_f64().unwrap()).collect();
    let mean = nmse.iter().sum::<f64>() / 2.0;
    assert!((sum["nmse"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    let sd = ((nmse[0] - mean).powi(2) + (nmse[1] - mean).powi(2)).sqrt();
    assert!((sum["nmse"]["sd"].as_f64().unwrap() - sd).abs() < 1e-12);
    for k in 0..2 {
        for f in ["predictions.csv", "metrics.csv", "metrics.json", "model.json", "trace.csv"] {
            assert!(out.join(format!("repeat_{k}")).join(f).exists());
        }
    }
    let flat = dir.path().join("flat");
    run_ok(&["experiment", "--config", &cfg, "--ablation", "flat", "--out", s(&flat)]);
    let sum: serde_json::Value = serde_json::from_str(&fs::read_to_string(flat.join("summary.json")).unwrap()).unwrap();
    assert_eq!(sum["flat"], true);
    // Both arms see identical test sets.
    assert_eq!(
        fs::read(out.join("repeat_0/test.csv")).unwrap(),
        fs::read(flat.join("repeat_0/test.csv")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    run_ok(&["generate", "--config", &cfg, "--out", s(&a)]);
    run_ok(&["generate", "--config", &cfg, "--seed", "3", "--out", s(&b)]);
    run_ok(&["generate", "--config", &cfg, "--seed", "4", "--out", s(&c)]);
    let read = |p: &Path| fs::read(p.join("data.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let unknown = config(dir.path(), "[model]\nlatent_dims = 2\n");
    let r = hmogp(&["generate", "--config", &unknown, "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("latent_dims"));

    let bad = config(dir.path(), "[split]\nfraction = 1.5\n");
    let r = hmogp(&["fit", "--config", &bad, "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("split.fraction"));

    let csv_without_path = config(dir.path(), "[dataset]\nsource = \"csv\"\n");
    let r = hmogp(&["fit", "--config", &csv_without_path, "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("dataset.path"));

    let r = hmogp(&["generate", "--config", s(&dir.path().join("nope.toml"))]);
    assert_eq!(r.status.code(), Some(2));

    let r = hmogp(&["predict", "--model", s(&dir.path().join("none.json")), "--points", "x.csv", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));

    let bad_csv = dir.path().join("bad.csv");
    fs::write(&bad_csv, "output,replica,x_0,y\n0,0,zero,1\n").unwrap();
    let preds = dir.path().join("p.csv");
    fs::write(&preds, "output,replica,x_0,mean,variance\n0,0,0,1,1\n").unwrap();
    let r = hmogp(&["eval", "--predictions", s(&preds), "--truth", s(&bad_csv), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 2"));

    let r = hmogp(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(2));
}
