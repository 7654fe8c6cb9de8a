use std::fs;
use std::path::Path;
use std::process::Command;

use facts::pipeline::{AmplifyConfig, InputConfig, PipelineConfig, SliceConfig};
use facts_core::slicing::SliceHyper;
use facts_core::synth::SynthConfig;

fn small_synth() -> SynthConfig {
    SynthConfig {
        num_classes: 3,
        num_attributes: 3,
        class_sizes: vec![200, 200, 200],
        correlation: 0.9,
        feature_dim: 8,
        embed_dim: 4,
        test_per_cell: 20,
        ..SynthConfig::nico95_like(0)
    }
}

fn facts(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_facts")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "facts {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json<T: serde::Serialize>(p: &Path, v: &T) {
    fs::write(p, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

#[test]
fn stage_by_stage_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth_cfg = d.join("synth.json");
    write_json(&synth_cfg, &small_synth());

    let data = d.join("data");
    facts(&["synth", "--config", s(&synth_cfg), "--seed", "3", "--out", s(&data)]);
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());

    let model = d.join("model");
    let log = facts(&[
        "amplify", "--manifest", s(&manifest), "--lambdas", "1e-4,0.1,1", "--lr", "0.05", "--epochs", "10",
        "--seed", "3", "--out", s(&model), "--threads", "1",
    ]);
    assert!(log.contains("selected lambda"), "{log}");

    let slices = d.join("slices");
    facts(&[
        "slice", "--manifest", s(&manifest), "--model", s(&model), "--k", "6", "--alpha", "25", "--delta-p", "1e-3",
        "--cov", "full", "--fit-split", "val", "--assign-split", "test", "--out", s(&slices),
    ]);
    assert!(slices.join("report.json").exists() && slices.join("report.csv").exists());
    let csv = fs::read_to_string(slices.join("report.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    let grid = d.join("grid.json");
    fs::write(&grid, r#"{"k_hat": [6], "alpha": [1.0, 25.0], "delta_p": [1e-3, 1e-2]}"#).unwrap();
    let tuned = d.join("tuned");
    let log = facts(&["tune", "--manifest", s(&manifest), "--model", s(&model), "--grid", s(&grid), "--out", s(&tuned)]);
    assert!(log.contains("selected grid point"), "{log}");
    assert!(tuned.join("tune.json").exists());

    let metrics = d.join("metrics.json");
    let log = facts(&["eval", "--gt", s(&manifest), "--pred", s(&slices), "--k", "10", "--out", s(&metrics)]);
    assert!(log.starts_with("precision_at_10 "));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let p = m["precision_at_k"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let md = facts(&["report", "--report", s(&slices.join("report.json")), "--metrics", s(&metrics), "--depth", "2"]);
    assert!(md.contains("# Slice report") && md.contains("Precision@10"));
}

#[test]
fn invalid_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_facts"))
        .args(["synth", "--preset", "imagenet", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));

    let bad = dir.path().join("bad.fsmx");
    fs::write(&bad, b"not a matrix").unwrap();
    let manifest = dir.path().join("manifest.json");
    fs::write(
        &manifest,
        format!(
            r#"{{"version":1,"metadata_path":"meta.csv","matrix_blocks":{{"embedding":{{"path":"{}","rows":1,"cols":1}}}}}}"#,
            s(&bad)
        ),
    )
    .unwrap();
    fs::write(dir.path().join("meta.csv"), "id,split,label,attribute,bias_conflicting\na,train,0,-1,-1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_facts"))
        .args(["amplify", "--manifest", s(&manifest), "--out", s(&dir.path().join("m"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn pipeline_is_byte_identical_single_threaded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        input: InputConfig::Synth(small_synth()),
        amplify: Some(AmplifyConfig {
            lambdas: vec![1e-4, 0.1, 1.0],
            ..AmplifyConfig::default()
        }),
        slice: SliceConfig {
            hyper: SliceHyper {
                k_hat: 6,
                ..SliceHyper::default()
            },
            ..SliceConfig::default()
        },
        ..PipelineConfig::default()
    };
    let cfg_path = dir.path().join("pipeline.json");
    write_json(&cfg_path, &cfg);
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            facts(&["--threads", "1", "--seed", "11", "--config", s(&cfg_path), "--out", s(&out), "pipeline"]);
            for f in ["metrics.json", "report.md", "run.json", "slices/report.csv", "data/manifest.json"] {
                assert!(out.join(f).exists(), "missing {f}");
            }
            (
                fs::read(out.join("metrics.json")).unwrap(),
                fs::read(out.join("slices/report.csv")).unwrap(),
            )
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
