use std::path::Path;
use std::process::{Command, Output};

use nib_core::heatmap::parse_pgm;

fn nib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nib"))
        .args(args)
        .output()
        .unwrap()
}

fn init(dir: &Path, samples: usize) {
    let out = nib(&[
        "init-toy",
        "--seed",
        "0",
        "--samples",
        &samples.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn paths(dir: &Path) -> (String, String) {
    (
        dir.join("model.json").display().to_string(),
        dir.join("dataset.json").display().to_string(),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn init_toy_writes_bundles_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    init(dir.path(), 64);
    let names: Vec<String> = files(dir.path()).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["dataset.json", "dataset.nibt", "model.json", "model.nibt"]
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(manifest["family"], "dual-encoder-v1");
    assert_eq!(manifest["bundle"], "model.nibt");
    let dataset: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("dataset.json")).unwrap()).unwrap();
    assert_eq!(dataset["samples"].as_array().unwrap().len(), 64);
}

#[test]
fn init_toy_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    init(a.path(), 3);
    init(b.path(), 3);
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn nib_attribute_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    init(dir.path(), 3);
    let (model, data) = paths(dir.path());
    for modality in ["image", "text"] {
        let mut runs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{modality}-{run}"));
            let o = nib(&[
                "attribute",
                "--model",
                &model,
                "--dataset",
                &data,
                "--method",
                "nib",
                "--modality",
                modality,
                "--num-steps",
                "10",
                "--out",
                out.to_str().unwrap(),
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            runs.push(files(&out));
        }
        assert_eq!(runs[0].len(), 9);
        assert_eq!(runs[0], runs[1]);
    }
}

#[test]
fn heatmap_files_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    init(dir.path(), 1);
    let (model, data) = paths(dir.path());
    let out = dir.path().join("maps");
    let o = nib(&[
        "attribute",
        "--model",
        &model,
        "--dataset",
        &data,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let stem = out.join("toy-0-000.nib.image");
    let (w, h, px) = parse_pgm(&std::fs::read(stem.with_extension("image.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (32, 32));
    let csv = std::fs::read_to_string(stem.with_extension("image.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), h);
    assert!(rows.iter().all(|r| r.len() == w));
    let flat: Vec<f64> = rows.concat();
    let argmax = |xs: &[f64]| {
        (0..xs.len())
            .max_by(|&a, &b| xs[a].total_cmp(&xs[b]))
            .unwrap()
    };
    let argmin = |xs: &[f64]| {
        (0..xs.len())
            .min_by(|&a, &b| xs[a].total_cmp(&xs[b]))
            .unwrap()
    };
    assert_eq!(px[argmax(&flat)], 255);
    assert_eq!(px[argmin(&flat)], 0);
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(stem.with_extension("image.json")).unwrap()).unwrap();
    assert_eq!(meta["layer"], 3);
    assert_eq!(meta["num_steps"], 10);
    assert_eq!(meta["method"], "nib");
    assert!(meta["completeness_gap"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    init(dir.path(), 1);
    let (model, data) = paths(dir.path());
    let o = nib(&[
        "attribute",
        "--model",
        &model,
        "--dataset",
        &data,
        "--method",
        "rise",
        "--out",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = nib(&[
        "evaluate",
        "--model",
        &model,
        "--dataset",
        &data,
        "--methods",
        "nib,lico",
        "--out",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(nib(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nib(&["verify", "--bogus"]).status.code(), Some(2));
    assert_eq!(nib(&["attribute"]).status.code(), Some(2));
    assert_eq!(nib(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_files_fail_with_a_code() {
    let o = nib(&[
        "attribute",
        "--model",
        "/nonexistent/model.json",
        "--dataset",
        "d.json",
        "--out",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[io_error]"));
}

#[test]
fn layer_out_of_range_fails() {
    let dir = tempfile::tempdir().unwrap();
    init(dir.path(), 1);
    let (model, data) = paths(dir.path());
    let out = dir.path().join("maps");
    let o = nib(&[
        "attribute",
        "--model",
        &model,
        "--dataset",
        &data,
        "--layer",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("layer_out_of_range"));
}

#[test]
fn evaluate_and_sweep_write_json() {
    let dir = tempfile::tempdir().unwrap();
    init(dir.path(), 4);
    let (model, data) = paths(dir.path());
    let report = dir.path().join("report.json");
    let o = nib(&[
        "evaluate",
        "--model",
        &model,
        "--dataset",
        &data,
        "--methods",
        "nib,random",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["method"], "nib");
    assert_eq!(rows[1]["method"], "random");
    for key in [
        "img_conf_drop",
        "img_conf_incr",
        "text_conf_drop",
        "text_conf_incr",
        "fps",
    ] {
        assert!(rows[0][key].is_number(), "{key}");
    }

    let sweep = dir.path().join("sweep.json");
    let o = nib(&[
        "sweep-beta",
        "--model",
        &model,
        "--dataset",
        &data,
        "--betas",
        "0.01,0.5",
        "--out",
        sweep.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&sweep).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(v[1]["beta"], 0.5);
    assert_eq!(
        nib(&[
            "sweep-beta",
            "--model",
            &model,
            "--dataset",
            &data,
            "--betas",
            "0"
        ])
        .status
        .code(),
        Some(1)
    );
}
