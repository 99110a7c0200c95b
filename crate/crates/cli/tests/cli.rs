//! End-to-end runs of the `fenestra` binary: exit codes, artifact layout,
//! and byte-level determinism.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fenestra::events::{write_dataset_csv_file, ActionKind};
use fenestra::glm::CoefKey;
use fenestra::synth::{generate, GeneratorSpec};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_fenestra")
}

fn run(args: &[&str]) -> Output {
    Command::new(binary())
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Fourteen days of scripted sensor exports: smooth interior climate,
/// event-based window sensor with two scripted openings per day.
fn write_sensor_fixture(dir: &Path, always_closed: bool) -> BTreeMap<&'static str, PathBuf> {
    let start = chrono::DateTime::parse_from_rfc3339("2020-11-01T00:00:00Z")
        .unwrap()
        .with_timezone(&chrono::Utc);
    let minutes = 14 * 1440;
    let ts = |i: usize| {
        (start + chrono::Duration::minutes(i as i64))
            .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    };
    let tau = std::f64::consts::TAU;

    let mut files = BTreeMap::new();
    let mut write = |name: &'static str, body: String| {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        files.insert(name.split('.').next().unwrap(), path);
    };

    let mut t_indoor = String::from("timestamp,value\n");
    for i in 0..minutes {
        let v = 21.0 + 0.8 * (tau * i as f64 / 1440.0).sin();
        let _ = writeln!(t_indoor, "{},{v:.3}", ts(i));
    }
    write("t_indoor.csv", t_indoor);

    let mut co2 = String::from("timestamp,value\n");
    for i in (0..minutes).step_by(2) {
        let v = 520.0
            + 140.0 * (tau * i as f64 / 720.0).sin()
            + 90.0 * (tau * i as f64 / 97.0).sin();
        let _ = writeln!(co2, "{},{v:.2}", ts(i));
    }
    write("co2.csv", co2);

    let mut rh = String::from("timestamp,value\n");
    for i in (0..minutes).step_by(3) {
        let v = 38.0 + 6.0 * (tau * i as f64 / 1440.0 + 1.0).sin();
        let _ = writeln!(rh, "{},{v:.3}", ts(i));
    }
    write("rh.csv", rh);

    let mut t_outside = String::from("timestamp,value\n");
    for i in (0..minutes).step_by(10) {
        let v = 2.0 + 4.0 * (tau * i as f64 / 1440.0 - 2.0).sin() - 0.1 * (i / 1440) as f64;
        let _ = writeln!(t_outside, "{},{v:.3}", ts(i));
    }
    write("t_outside.csv", t_outside);

    // Magnetic contact sensor: reports only on change.
    let mut window = String::from("timestamp,value\n");
    let _ = writeln!(window, "{},0", ts(0));
    if !always_closed {
        for day in 0..14 {
            let base = day * 1440;
            let _ = writeln!(window, "{},1", ts(base + 540));
            let _ = writeln!(window, "{},0", ts(base + 540 + 30));
            let _ = writeln!(window, "{},1", ts(base + 1200));
            let _ = writeln!(window, "{},0", ts(base + 1200 + 20));
        }
    }
    write("window_state.csv", window);
    files
}

fn write_sensor_config(dir: &Path, files: &BTreeMap<&'static str, PathBuf>, folds: usize) -> PathBuf {
    let config = format!(
        r#"
tz_offset_minutes = 60
max_gap_minutes = 5
action = "both"
weighting = "balanced"
out_dir = "{out}"

[inputs]
window_state = "{w}"
t_indoor = "{ti}"
co2 = "{c}"
rh = "{r}"
t_outside = "{to}"

[split]
train_fraction = 0.8
folds = {folds}
seed = 42
"#,
        out = dir.join("out").display(),
        w = files["window_state"].display(),
        ti = files["t_indoor"].display(),
        c = files["co2"].display(),
        r = files["rh"].display(),
        to = files["t_outside"].display(),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn reference_generator(n: usize, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        coefficients: [
            (CoefKey::AlphaDs1, -1.729),
            (CoefKey::AlphaDs2, -0.242),
            (CoefKey::AlphaDs3, -3.720),
            (CoefKey::TIndoor, -0.627),
            (CoefKey::LogCo2, 1.095),
            (CoefKey::Rh, 0.299),
            (CoefKey::TOutsideAvg, 0.980),
        ]
        .into_iter()
        .collect(),
        segment_distribution: [420.0 / 1440.0, 540.0 / 1440.0, 480.0 / 1440.0],
        n,
        seed,
        feature_correlation: None,
        action: ActionKind::Opening,
    }
}

fn write_dataset_config(dir: &Path, dataset: &Path, folds: usize, seed: u64) -> PathBuf {
    let config = format!(
        r#"
action = "open"
weighting = "balanced"
out_dir = "{out}"

[dataset]
path = "{ds}"

[split]
train_fraction = 0.8
folds = {folds}
seed = {seed}
"#,
        out = dir.join("out").display(),
        ds = dataset.display(),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn sensor_pipeline_ingest_fit_report() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_sensor_fixture(dir.path(), false);
    let config = write_sensor_config(dir.path(), &files, 5);

    let out = run(&["ingest", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0);
    let features = std::fs::read_to_string(dir.path().join("out/features.csv")).unwrap();
    // Header plus one row per grid minute spanning first to last sample.
    assert_eq!(features.lines().count(), 1 + 14 * 1440);
    assert!(features.starts_with("timestamp,t_indoor,log_co2,rh,t_outside_avg,segment"));

    let out = run(&["report", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    // Two scripted openings per day for 14 days.
    let opened: u64 = report["events"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v["opened"].as_u64().unwrap())
        .sum();
    assert_eq!(opened, 28);
    assert_eq!(report["episodes"].as_array().unwrap().len(), 28);

    let out = run(&["fit", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0);
    for name in [
        "model_opening.json",
        "model_closing.json",
        "trace_opening.json",
        "trace_closing.json",
        "eval_opening.json",
        "eval_closing.json",
        "roc_opening.csv",
        "pr_opening.csv",
        "dataset_opening.csv",
        "scaling_opening.json",
    ] {
        assert!(
            dir.path().join("out").join(name).exists(),
            "missing artifact {name}"
        );
    }
    let model: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/model_opening.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(model["action"], "opening");
    assert_eq!(model["seed_provenance"], 42);
}

#[test]
fn report_and_ingest_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_sensor_fixture(dir.path(), false);
    let config = write_sensor_config(dir.path(), &files, 5);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let run_out = run(&[
            "report",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_exit(&run_out, 0);
        let run_out = run(&[
            "ingest",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_exit(&run_out, 0);
    }
    for name in ["report.json", "features.csv"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn always_closed_window_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_sensor_fixture(dir.path(), true);
    let config = write_sensor_config(dir.path(), &files, 5);
    let out = run(&["fit", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2);
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_sensor_fixture(dir.path(), false);
    let config = write_sensor_config(dir.path(), &files, 1);
    let out = run(&["fit", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 1);

    let out = run(&["fit", "--config", config.to_str().unwrap(), "--action", "sideways"]);
    assert_exit(&out, 1);

    let out = run(&["fit", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_exit(&out, 1);
}

#[test]
fn schema_remap_reads_renamed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = write_sensor_fixture(dir.path(), false);
    // Rewrite the CO2 file with renamed headers.
    let renamed = dir.path().join("co2_renamed.csv");
    let original = std::fs::read_to_string(&files["co2"]).unwrap();
    let body = original.replacen("timestamp,value", "time,reading", 1);
    std::fs::write(&renamed, body).unwrap();
    files.insert("co2", renamed);
    let config = write_sensor_config(dir.path(), &files, 5);
    // Schema override applies to every file, so rename the others too.
    for name in ["window_state", "t_indoor", "rh", "t_outside"] {
        let body = std::fs::read_to_string(&files[name]).unwrap();
        std::fs::write(&files[name], body.replacen("timestamp,value", "time,reading", 1)).unwrap();
    }
    let out = run(&[
        "ingest",
        "--config",
        config.to_str().unwrap(),
        "--schema",
        "timestamp=time,value=reading",
    ]);
    assert_exit(&out, 0);
}

#[test]
fn dataset_mode_fit_recovers_structure() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&reference_generator(6_000, 5)).unwrap();
    let dataset_path = dir.path().join("dataset.csv");
    write_dataset_csv_file(&ds, &dataset_path).unwrap();
    let config = write_dataset_config(dir.path(), &dataset_path, 5, 17);

    let out = run(&["fit", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0);
    let model: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/model_opening.json")).unwrap(),
    )
    .unwrap();
    // The strong drivers always survive selection at this sample size.
    let terms: Vec<&str> = model["terms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_str().unwrap())
        .collect();
    assert!(terms.contains(&"log_co2"), "terms: {terms:?}");
    assert!(terms.contains(&"alpha_ds1"), "terms: {terms:?}");
    let eval: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/eval_opening.json")).unwrap(),
    )
    .unwrap();
    assert!(eval["auc_roc"].as_f64().unwrap() > 0.6);

    // Evaluate the artifact against its own dataset export.
    let eval_dir = dir.path().join("eval_out");
    let out = run(&[
        "eval",
        "--model",
        dir.path().join("out/model_opening.json").to_str().unwrap(),
        "--dataset",
        dir.path().join("out/dataset_opening.csv").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(eval_dir.join("eval.json").exists());
    assert!(eval_dir.join("roc.csv").exists());
}

#[test]
fn dataset_mode_rejects_both_actions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&reference_generator(500, 3)).unwrap();
    let dataset_path = dir.path().join("dataset.csv");
    write_dataset_csv_file(&ds, &dataset_path).unwrap();
    let config = write_dataset_config(dir.path(), &dataset_path, 5, 1);
    let out = run(&["fit", "--config", config.to_str().unwrap(), "--action", "both"]);
    assert_exit(&out, 1);
}

#[test]
fn single_selection_mode_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&reference_generator(3_000, 9)).unwrap();
    let dataset_path = dir.path().join("dataset.csv");
    write_dataset_csv_file(&ds, &dataset_path).unwrap();
    let config = write_dataset_config(dir.path(), &dataset_path, 5, 2);
    let out = run(&[
        "fit",
        "--config",
        config.to_str().unwrap(),
        "--selection",
        "single",
    ]);
    assert_exit(&out, 0);
    let trace: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/trace_opening.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(trace["folds"].as_array().unwrap().len(), 1);
}

#[test]
fn synth_and_recover_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let gspec = reference_generator(2_500, 77);
    let gspec_path = dir.path().join("generator.json");
    std::fs::write(&gspec_path, serde_json::to_string_pretty(&gspec).unwrap()).unwrap();

    let synth_dir = dir.path().join("synth_out");
    let out = run(&[
        "synth",
        "--generator",
        gspec_path.to_str().unwrap(),
        "--out",
        synth_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(synth_dir.join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2_500);

    let recover_dir = dir.path().join("recover_out");
    let out = run(&[
        "recover",
        "--generator",
        gspec_path.to_str().unwrap(),
        "--folds",
        "4",
        "--out",
        recover_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let recovery: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(recover_dir.join("recovery.json")).unwrap())
            .unwrap();
    assert!(recovery["max_abs_error"].as_f64().unwrap().is_finite());
    assert!(recover_dir.join("trace.json").exists());
}

#[test]
fn surface_exports_one_file_per_segment() {
    let dir = tempfile::tempdir().unwrap();
    // Artifact written directly from the reference coefficients.
    let gspec = reference_generator(10, 1);
    let model = fenestra::glm::FittedModel::from_coefficients(
        ActionKind::Opening,
        gspec.coefficients.clone(),
        None,
    )
    .unwrap();
    let artifact = fenestra_cli::artifact::ModelArtifact::from_model(&model, None);
    let model_path = dir.path().join("model.json");
    std::fs::write(&model_path, serde_json::to_string_pretty(&artifact).unwrap()).unwrap();

    let out_dir = dir.path().join("surface_out");
    let out = run(&[
        "surface",
        "--model",
        model_path.to_str().unwrap(),
        "--x",
        "t_outside_avg:-1:1:1",
        "--y",
        "log_co2:-1:1:1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    for segment in ["ds1", "ds2", "ds3"] {
        let body =
            std::fs::read_to_string(out_dir.join(format!("surface_{segment}.csv"))).unwrap();
        // 3x3 grid plus header.
        assert_eq!(body.lines().count(), 10, "{segment}");
    }

    // Single-segment export.
    let out = run(&[
        "surface",
        "--model",
        model_path.to_str().unwrap(),
        "--x",
        "t_outside_avg:-1:1:1",
        "--y",
        "log_co2:-1:1:1",
        "--segment",
        "ds2",
        "--out",
        dir.path().join("one_segment").to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(dir.path().join("one_segment/surface_ds2.csv").exists());

    // Axis term outside the model errors out.
    let out = run(&[
        "surface",
        "--model",
        model_path.to_str().unwrap(),
        "--x",
        "t_outside_avg:-1:1:1",
        "--y",
        "log_co2:bad",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
}
