use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sitegaze::synth::{texture, TextureKind};

fn sitegaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sitegaze"))
        .args(args)
        .output()
        .expect("run sitegaze")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Three small textured references in `dir/frames`, registry in `dir/reg`.
fn small_registry(dir: &Path) -> std::path::PathBuf {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).unwrap();
    for i in 0..3 {
        texture(TextureKind::Blended, 160, 120, 10 + i)
            .unwrap()
            .save_png(&frames.join(format!("f{i}.png")))
            .unwrap();
    }
    let reg = dir.join("reg");
    let o = sitegaze(&["build-registry", "--frames", p(&frames), "--out", p(&reg), "--max-keypoints", "300"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("3 images"));
    reg
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(sitegaze(&[]).status.code(), Some(2));
    assert_eq!(sitegaze(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_lists_default_thresholds() {
    let o = sitegaze(&["analyze", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for needle in ["--min-dwell-ms", "240", "--dispersion-px", "25", "--min-inliers", "15", "--sync-slack-ms"] {
        assert!(text.contains(needle), "missing {needle} in help");
    }
}

#[test]
fn build_registry_rejects_missing_directory() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = sitegaze(&["build-registry", "--frames", p(&missing), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn build_registry_names_the_corrupt_image() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir_all(&frames).unwrap();
    texture(TextureKind::Noise, 96, 96, 1).unwrap().save_png(&frames.join("good.png")).unwrap();
    fs::write(frames.join("bad.png"), b"garbage").unwrap();
    let o = sitegaze(&["build-registry", "--frames", p(&frames), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.png"), "{}", stderr(&o));
}

#[test]
fn annotate_and_propagate_errors() {
    let dir = tempfile::tempdir().unwrap();
    let reg = small_registry(dir.path());

    let o = sitegaze(&["propagate", "--registry", p(&reg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("NoSeeds"), "{}", stderr(&o));

    let o = sitegaze(&["annotate", "--registry", p(&reg), "--aoi", "H1", "--image", "f9", "--box", "1,1,20,20"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("UnknownImage"));

    let o = sitegaze(&["annotate", "--registry", p(&reg), "--aoi", "H1", "--image", "f0", "--box", "10,10,400,20"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("BoxOutOfBounds"));

    let o = sitegaze(&["annotate", "--registry", p(&reg), "--aoi", "H1", "--image", "f0", "--box", "30,30,10,40"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("InvertedBox"));

    let o = sitegaze(&["annotate", "--registry", p(&reg), "--aoi", "H1", "--image", "f0", "--box", "1,2,three,4"]);
    assert_eq!(o.status.code(), Some(2));

    let o = sitegaze(&[
        "annotate", "--registry", p(&reg), "--aoi", "H1", "--label", "Open edge", "--image", "f0", "--box",
        "20,20,60,50",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // Unrelated textures share no geometry, so nothing is covered.
    let report = dir.path().join("prop.json");
    let o = sitegaze(&["propagate", "--registry", p(&reg), "--report", p(&report), "--deterministic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("coverage 0/2"), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["tool"], "sitegaze");
    assert!(v.get("generated_at_unix").is_none());
    assert_eq!(v["report"]["uncovered_images"].as_array().unwrap().len(), 2);
}

#[test]
fn corrupted_registry_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let reg = small_registry(dir.path());
    let blob = reg.join("descriptors.bin");
    let mut bytes = fs::read(&blob).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&blob, bytes).unwrap();
    let o = sitegaze(&["propagate", "--registry", p(&reg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ChecksumMismatch"));
    let o = sitegaze(&["propagate", "--registry", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_reports_per_aoi_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let system = dir.path().join("system.json");
    let manual = dir.path().join("manual.csv");
    fs::write(&system, r#"{"H1": 900, "H2": 235, "H3": 257, "H4": 1148, "H5": 1270}"#).unwrap();
    fs::write(&manual, "aoi_id,dwell_ms\nH1,744\nH2,248\nH3,248\nH4,992\nH5,992\n").unwrap();
    let csv = dir.path().join("v.csv");
    let o = sitegaze(&["validate", "--system", p(&system), "--manual", p(&manual), "--csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean accuracy 88%"));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("aoi_id,system_ms,manual_ms,variation_ms,accuracy_pct\nH1,900,744,156,83\n"), "{text}");

    fs::write(&manual, "aoi_id,dwell_ms\nH1,744\n").unwrap();
    let o = sitegaze(&["validate", "--system", p(&system), "--manual", p(&manual)]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(&manual, "aoi,ms\nH1,744\n").unwrap();
    let o = sitegaze(&["validate", "--system", p(&system), "--manual", p(&manual)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn correlate_produces_one_row_per_metric() {
    let dir = tempfile::tempdir().unwrap();
    let workers = dir.path().join("workers.csv");
    let mut text = String::from("worker_id,av_hri,sd_ms,ft_ms,fc,mfd_ms,roaft,fr\n");
    for i in 0..10 {
        let x = i as f64;
        text.push_str(&format!(
            "w{i},{},{},{},{},{},{},\n",
            0.4 + 0.05 * x,
            15000.0 + 500.0 * x,
            7000.0 + 300.0 * x + (x * 7.0) % 5.0 * 100.0,
            30 + i % 4,
            240.0 + (x * 3.0) % 7.0,
            0.4 + 0.01 * x
        ));
    }
    fs::write(&workers, text).unwrap();
    let out = dir.path().join("corr.json");
    let o = sitegaze(&["correlate", "--workers", p(&workers), "--out", p(&out), "--deterministic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["metric"].as_str().unwrap()).collect();
    assert_eq!(names, ["SD", "FT", "FC", "MFD", "ROAFT", "FR"]);
    let sd = &rows[0];
    assert!((sd["r"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(sd["n"], 10);
    // The FR column is empty for every worker.
    assert!(rows[5]["r"].is_null());

    let o = sitegaze(&["correlate", "--workers", p(&dir.path().join("missing.csv")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_rejects_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, "{ not json").unwrap();
    let o = sitegaze(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("a"))]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(&spec, r#"{"script": {"events": [{"kind": "fixate", "x": 900, "y": 10, "duration_ms": 200}]}}"#).unwrap();
    let o = sitegaze(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("b"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    fs::write(&spec, r#"{"scene": {"view_count": 0}}"#).unwrap();
    let o = sitegaze(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn synth_writes_a_complete_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"scene": {"view_count": 2, "width": 160, "height": 120, "aois": []},
            "script": {"events": [{"kind": "fixate", "x": 80, "y": 60, "duration_ms": 400},
                                  {"kind": "off_scene", "duration_ms": 120}]}}"#,
    )
    .unwrap();
    let out = dir.path().join("s");
    let o = sitegaze(&["synth", "--spec", p(&spec), "--out", p(&out), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["reference/base.png", "reference/v00.png", "reference/v01.png", "poses.csv", "scene.json",
        "frames/frames.json", "frames/frame_000000.png", "frames/frame_000012.png", "gaze.csv", "truth.json", "spec.json"]
    {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(!out.join("frames/frame_000013.png").exists());
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("spec.json")).unwrap()).unwrap();
    assert_eq!(written["scene"]["seed"], 3);
    assert_eq!(written["script"]["seed"], 3);
}
