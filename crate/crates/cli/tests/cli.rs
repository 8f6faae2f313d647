use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mvreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvreg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const GEOM: &str = r#"{"source_to_detector":1000,"detector_width":64,"detector_height":64,"pixel_spacing":2.0}"#;
const PA: &str = r#"{"matrix":[1,0,0,0, 0,0,1,-800, 0,-1,0,0, 0,0,0,1]}"#;
const PA_SHIFTED: &str = r#"{"matrix":[1,0,0,1.5, 0,0,1,-800, 0,-1,0,0, 0,0,0,1]}"#;

/// Phantom `p1`, geometry, PA pose files and two rendered fixed images.
fn setup(dir: &Path) {
    let out = mvreg(
        dir,
        &["phantom", "--kind", "sphere_pair", "--dims", "32,32,32", "--spacing", "2,2,2", "--seed", "1", "--out", "p1"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(dir.join("geom.json"), GEOM).unwrap();
    fs::write(dir.join("pa.json"), PA).unwrap();
    fs::write(dir.join("pa2.json"), PA_SHIFTED).unwrap();
    for (pose, img) in [("pa.json", "f1"), ("pa2.json", "f2")] {
        let out = mvreg(dir, &["render", "--volume", "p1", "--pose", pose, "--geom", "geom.json", "--out", img]);
        assert_eq!(code(&out), 0);
    }
}

#[test]
fn phantom_writes_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["phantom", "--kind", "sphere_pair", "--dims", "16,16,16", "--spacing", "1,1,1", "--seed", "1", "--out", "a"];
    assert_eq!(code(&mvreg(d, &args)), 0);
    for f in ["a.vol.json", "a.vol.raw", "a.landmarks.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let first = fs::read(d.join("a.vol.raw")).unwrap();
    assert_eq!(code(&mvreg(d, &args)), 0);
    assert_eq!(first, fs::read(d.join("a.vol.raw")).unwrap());
}

#[test]
fn missing_out_is_a_usage_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvreg(dir.path(), &["phantom", "--kind", "sphere_pair", "--dims", "16,16,16"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn bad_dims_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvreg(dir.path(), &["phantom", "--kind", "sphere_pair", "--dims", "4,4,4", "--out", "x"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn render_is_reproducible_and_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let again = mvreg(d, &["render", "--volume", "p1", "--pose", "pa.json", "--geom", "geom.json", "--out", "g1", "--pgm", "g1.pgm"]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(d.join("f1.img.raw")).unwrap(), fs::read(d.join("g1.img.raw")).unwrap());
    assert!(fs::read(d.join("g1.pgm")).unwrap().starts_with(b"P5"));

    let missing = mvreg(d, &["render", "--volume", "nope", "--pose", "pa.json", "--geom", "geom.json", "--out", "x"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn intensity_render_of_empty_volume_is_white() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("z.vol.json"), r#"{"dims":[4,4,4],"spacing":[1,1,1],"origin":[-2,-2,-2],"dtype":"f32le"}"#).unwrap();
    fs::write(d.join("z.vol.raw"), vec![0u8; 4 * 64]).unwrap();
    fs::write(d.join("geom.json"), GEOM).unwrap();
    fs::write(d.join("pa.json"), PA).unwrap();
    let out = mvreg(d, &["render", "--volume", "z", "--pose", "pa.json", "--geom", "geom.json", "--mode", "intensity", "--out", "w"]);
    assert_eq!(code(&out), 0);
    let raw = fs::read(d.join("w.img.raw")).unwrap();
    assert_eq!(raw.len(), 4 * 64 * 64);
    assert!(raw.chunks_exact(4).all(|c| f32::from_le_bytes(c.try_into().unwrap()) == 1.0));
}

#[test]
fn register_honours_iteration_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    fs::write(d.join("cfg.json"), r#"{"iterations": 10}"#).unwrap();
    let out = mvreg(
        d,
        &["register", "--volume", "p1", "--geom", "geom.json", "--fixed1", "f1", "--fixed2", "f2",
          "--init1", "pa.json", "--init2", "pa2.json", "--config", "cfg.json", "--out", "r.json"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["loss_trace"].as_array().unwrap().len(), 10);
    // started at the truth, the first iterate is an exact match
    assert!(r["loss_trace"][0].as_f64().unwrap() < 1e-9);
}

#[test]
fn register_rejects_mismatched_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    fs::write(d.join("small.json"), GEOM.replace("\"detector_width\":64", "\"detector_width\":32")).unwrap();
    let out = mvreg(
        d,
        &["register", "--volume", "p1", "--geom", "small.json", "--fixed1", "f1", "--fixed2", "f2",
          "--init1", "pa.json", "--init2", "pa2.json", "--out", "r.json"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn register_coupled_keeps_views_tied() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    fs::write(d.join("cfg.json"), r#"{"iterations": 3}"#).unwrap();
    let out = mvreg(
        d,
        &["register-coupled", "--volume", "p1", "--geom", "geom.json", "--fixed1", "f1", "--fixed2", "f2",
          "--init", "pa.json", "--config", "cfg.json", "--out", "r.json"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["refined"].as_array().unwrap().len(), 2);
}

#[test]
fn evaluate_prints_table_row_and_default_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    fs::write(d.join("truth.json"), format!("[{PA}, {PA_SHIFTED}]")).unwrap();
    let out = mvreg(
        d,
        &["evaluate", "--true-poses", "truth.json", "--est-poses", "truth.json", "--landmarks", "p1.landmarks.json", "--geom", "geom.json"],
    );
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("0.00 ± 0.00, 100%"), "{text}");
    assert!(text.contains("0.194"), "{text}");

    fs::write(d.join("broken.json"), "{not json").unwrap();
    let bad = mvreg(
        d,
        &["evaluate", "--true-poses", "broken.json", "--est-poses", "truth.json", "--landmarks", "p1.landmarks.json", "--geom", "geom.json"],
    );
    assert_eq!(code(&bad), 2);
}

const SPEC: &str = r#"{
  "phantom": "sphere_pair",
  "dims": [24, 24, 24],
  "spacing": [2, 2, 2],
  "geometry": {"source_to_detector": 1000, "detector_width": 32, "detector_height": 32, "pixel_spacing": 4.0},
  "distribution": {"mean": [0,0,0,0,0,0], "stddev": [2,2,2,0.02,0.02,0.02]},
  "n_cases": 5,
  "initializer": {"kind": "perturbed", "dist": {"mean": [0,0,0,0,0,0], "stddev": [1,1,1,0.01,0.01,0.01]}},
  "refine": {"iterations": 4},
  "rng_seed": 7
}"#;

#[test]
fn experiment_writes_one_entry_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    let out = mvreg(d, &["--workers", "2", "experiment", "--spec", "spec.json", "--out-dir", "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["cases"].as_array().unwrap().len(), 5);

    let again = mvreg(d, &["--workers", "1", "experiment", "--spec", "spec.json", "--out-dir", "run1"]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(d.join("run/report.json")).unwrap(), fs::read(d.join("run1/report.json")).unwrap());
}

#[test]
fn experiment_rejects_schema_violations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SPEC.replace("\"n_cases\"", "\"bogus\": 1, \"n_cases\"")).unwrap();
    let out = mvreg(d, &["experiment", "--spec", "spec.json", "--out-dir", "run"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn sample_poses_lists_every_case() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    let out = mvreg(d, &["sample-poses", "--spec", "spec.json", "--out", "poses.json"]);
    assert_eq!(code(&out), 0);
    let cases: serde_json::Value = serde_json::from_slice(&fs::read(d.join("poses.json")).unwrap()).unwrap();
    let cases = cases.as_array().unwrap();
    assert_eq!(cases.len(), 5);
    assert_eq!(cases[0]["id"], "case_0000");
    assert_eq!(cases[0]["true_poses"].as_array().unwrap().len(), 2);
}
