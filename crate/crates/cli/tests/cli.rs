use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use featclip::datastore::{DatasetParts, Head};
use featclip::synthetic::{tempered_logits, ClipFixture};
use featclip::{save_dataset, Dataset, Matrix};
use serde_json::Value;
use tempfile::TempDir;

fn featclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featclip"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = featclip(args);
    assert!(
        out.status.success(),
        "featclip {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_dataset(dir: &Path, parts: DatasetParts) -> PathBuf {
    let path = dir.join("data");
    save_dataset(&Dataset::new(parts).unwrap(), &path, false).unwrap();
    path
}

fn logits_only(dir: &Path, logits: Matrix, labels: Vec<u32>) -> PathBuf {
    let k = logits.cols();
    write_dataset(dir, DatasetParts { k, logits: Some(logits), labels, ..Default::default() })
}

fn fixture(dir: &Path, n: usize) -> PathBuf {
    let ds = ClipFixture { n, ..Default::default() }.generate().unwrap();
    let path = dir.join("fixture");
    save_dataset(&ds, &path, true).unwrap();
    path
}

#[test]
fn theory_emits_one_row_per_sigma() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("th");
    ok(&["theory", "--model", "half_normal", "--c", "0.5", "--sigma-grid", "0.1:3:100", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("theory_curves.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,c,sigma,delta_h,d_delta_h_d_sigma");
    assert_eq!(lines.len(), 101);
    assert!(lines[1].starts_with("half_normal,0.5,0.1,"));
    assert!(lines[100].starts_with("half_normal,0.5,3,"));
    let cmp = read_json(out.join("theory_comparison.json"));
    assert_eq!(cmp["report"]["points"].as_array().unwrap().len(), 100);
}

#[test]
fn sweep_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let data = fixture(tmp.path(), 600);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&["sweep", "--data", s(&data), "--out", s(&out), "--seed", "11", "--grid", "0.5,1,2,4"]);
        fs::read(out.join("sweep.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("c,ece,adaptive_ece,accuracy,nll\n0.5,"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn feature_clip_on_logits_only_dataset_is_refused() {
    let tmp = TempDir::new().unwrap();
    let (z, labels) = tempered_logits(100, 3, 1.0, 1.0, 1);
    let data = logits_only(tmp.path(), z, labels);
    let out = featclip(&["fit", "--method", "fc", "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no classifier head") && err.contains("logit clipping"), "{err}");

    // logit clipping is the supported alternative
    ok(&["fit", "--method", "logit_clip", "--data", s(&data), "--out", s(&tmp.path().join("lc"))]);
}

#[test]
fn temperature_fit_cools_an_overconfident_model() {
    let tmp = TempDir::new().unwrap();
    let (z, labels) = tempered_logits(2000, 5, 1.5, 2.5, 3);
    let data = logits_only(tmp.path(), z, labels);
    let out = tmp.path().join("o");
    ok(&["fit", "--method", "ts", "--data", s(&data), "--out", s(&out), "--val-fraction", "0.5"]);
    let spec = read_json(out.join("calibrator.json"));
    let t = spec["stages"][0]["T"].as_f64().unwrap();
    assert_eq!(spec["stages"][0]["kind"], "temperature");
    assert!(t > 1.5 && t < 4.0, "T = {t}");
}

#[test]
fn composite_fit_reports_clip_then_temperature() {
    let tmp = TempDir::new().unwrap();
    let data = fixture(tmp.path(), 800);
    let out = tmp.path().join("o");
    ok(&["fit", "--method", "fc+ts", "--data", s(&data), "--out", s(&out), "--val-fraction", "0.3"]);
    let reports = read_json(out.join("fit_report.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["stage"]["kind"], "feature_clip");
    assert_eq!(reports[1]["stage"]["kind"], "temperature");
    let spec = read_json(out.join("calibrator.json"));
    assert_eq!(spec["stages"][0]["kind"], "feature_clip");

    // the fitted calibrator applies cleanly to the test split
    let applied = tmp.path().join("applied");
    ok(&["apply", "--calibrator", s(&out.join("calibrator.json")), "--data", s(&data), "--out", s(&applied), "--val-fraction", "0.3"]);
    let probs = fs::read_to_string(applied.join("probs.csv")).unwrap();
    assert_eq!(probs.lines().count(), 1 + 560);
    assert!(probs.starts_with("index,label,p_0,"));
}

#[test]
fn identity_calibrator_matches_vanilla_eval() {
    let tmp = TempDir::new().unwrap();
    let data = fixture(tmp.path(), 300);
    let cal = tmp.path().join("identity.json");
    fs::write(&cal, r#"{"stages":[{"kind":"identity"}]}"#).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["eval", "--data", s(&data), "--out", s(&a)]);
    ok(&["eval", "--data", s(&data), "--out", s(&b), "--calibrator", s(&cal)]);
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    assert_eq!(fs::read(a.join("reliability.csv")).unwrap(), fs::read(b.join("reliability.csv")).unwrap());
}

#[test]
fn eval_matches_hand_computed_ece() {
    // Two classes; logit gaps 0, 2, 2, 4. Confidences sigma(gap):
    // 0.5 (bin 7), 0.8808 (bin 13) twice, 0.9820 (bin 14); first three correct.
    let tmp = TempDir::new().unwrap();
    let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![4.0, 0.0]]).unwrap();
    let data = logits_only(tmp.path(), z, vec![0, 0, 1, 1]);
    let out = tmp.path().join("o");
    ok(&["eval", "--data", s(&data), "--out", s(&out), "--on", "all"]);
    let m = read_json(out.join("metrics.json"));

    let sig = |g: f64| 1.0 / (1.0 + (-g).exp());
    let (c0, c2, c4) = (sig(0.0), sig(2.0), sig(4.0));
    let expected = 0.25 * (1.0 - c0) + 0.5 * (1.0 - c2) + 0.25 * c4;
    assert!((m["ece"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(m["scale"], "fraction");
    assert!((m["accuracy"].as_f64().unwrap() - 0.75).abs() < 1e-15);
    assert_eq!(m["n"], 4);
    let rel = fs::read_to_string(out.join("reliability.csv")).unwrap();
    assert!(rel.starts_with("bin_lo,bin_hi,count,avg_conf,accuracy,gap\n"));
}

#[test]
fn analyze_flags_an_empty_hce_group() {
    let tmp = TempDir::new().unwrap();
    let n = 40;
    let features = Matrix::from_fn(n, 3, |i, j| if i % 3 == j { 10.0 } else { 0.5 });
    let labels = (0..n).map(|i| (i % 3) as u32).collect();
    let head = Head { weights: Matrix::from_fn(3, 3, |a, b| if a == b { 1.0 } else { 0.0 }), bias: vec![0.0; 3] };
    let data = write_dataset(
        tmp.path(),
        DatasetParts { k: 3, features: Some(features), labels, head: Some(head), ..Default::default() },
    );
    let out = tmp.path().join("o");
    ok(&["analyze", "--data", s(&data), "--out", s(&out), "--tau", "0.95", "--c", "1.0", "--on", "all"]);
    let groups = read_json(out.join("groups.json"));
    assert_eq!(groups["hce_empty"], true);
    assert_eq!(groups["lce_empty"], false);
    assert_eq!(groups["n_lce"], 40);
    assert!(groups["entropy_table"].is_null());
    assert!(!out.join("histogram.csv").exists());
    let over = fs::read_to_string(out.join("overconfidence.csv")).unwrap();
    assert!(over.contains("vanilla,0.95,40,0"));
}

#[test]
fn run_manifest_lists_every_file_with_its_size() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ing");
    ok(&["ingest", "--synthetic", "--n", "200", "--seed", "5", "--out", s(&out)]);
    let manifest = read_json(out.join("run_manifest.json"));
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["config"]["seed"], 5);
    let listed: Vec<(String, u64)> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["path"].as_str().unwrap().to_string(), f["bytes"].as_u64().unwrap()))
        .collect();
    for (path, bytes) in &listed {
        assert_eq!(fs::metadata(out.join(path)).unwrap().len(), *bytes, "{path}");
    }
    let mut on_disk = Vec::new();
    for entry in fs::read_dir(&out).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            for e in fs::read_dir(&p).unwrap() {
                on_disk.push(e.unwrap().path().strip_prefix(&out).unwrap().to_string_lossy().into_owned());
            }
        } else if p.file_name().unwrap() != "run_manifest.json" {
            on_disk.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    on_disk.sort();
    let mut names: Vec<String> = listed.into_iter().map(|(p, _)| p).collect();
    names.sort();
    assert_eq!(names, on_disk);

    // the generated dataset carries checksums and loads cleanly
    let summary = read_json(out.join("summary.json"));
    assert_eq!(summary["n"], 200);
    assert!(summary["checksums_verified"].as_u64().unwrap() >= 4);
}

#[test]
fn exit_codes_distinguish_usage_data_and_numeric_errors() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().join("o");

    assert_eq!(featclip(&["fit", "--method", "platt", "--data", "x", "--out", s(&o)]).status.code(), Some(2));
    assert_eq!(featclip(&["sweep", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(featclip(&["eval", "--out", s(&o)]).status.code(), Some(2));

    let missing = tmp.path().join("missing");
    assert_eq!(featclip(&["eval", "--data", s(&missing), "--out", s(&o)]).status.code(), Some(3));

    let data = fixture(tmp.path(), 100);
    fs::write(data.join("labels.bin"), [0u8; 12]).unwrap();
    let out = featclip(&["eval", "--data", s(&data), "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels.bin"));

    let zeros = write_dataset(
        &tmp.path().join("z"),
        DatasetParts {
            k: 2,
            features: Some(Matrix::zeros(20, 3)),
            labels: (0..20).map(|i| i % 2).collect(),
            head: Some(Head { weights: Matrix::zeros(2, 3), bias: vec![0.0, 0.5] }),
            ..Default::default()
        },
    );
    let out = featclip(&["fit", "--method", "fc", "--data", s(&zeros), "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
