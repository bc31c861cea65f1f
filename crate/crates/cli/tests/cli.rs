use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn neurotrend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurotrend"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn trend_subcommand_prints_trend_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("volumes.csv");
    fs::write(
        &csv,
        "patient_id,visit,csf_ml,gm_ml,wm_ml\n\
         P1,1,300,554.21,500\nP1,2,310,536.83,500\nP1,3,320,526.15,500\nP1,4,330,497.34,500\n\
         P2,1,300,500,500\nP2,2,300,500,500\n",
    )
    .unwrap();
    let out = neurotrend(&["trend", "--csv", s(&csv)]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("patient_id,tissue,n_visits,S,var_s,z_vol,confidence_pct,direction\n"));
    assert!(text.contains("P1,GM,4,-6,8.667,-1.6984,95.54,decreasing\n"), "{text}");
    assert!(text.contains("P1,CSF,4,6,8.667,1.6984,95.54,increasing\n"));
    assert!(text.contains("P1,WM,4,0,8.667,0.0000,50.00,no-trend\n"));
    assert!(!text.contains("P2,"));
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    fs::write(&manifest, r#"{"patients":[{"id":"P1","visits":["a.nii","b.nii"]}]}"#).unwrap();
    let out = neurotrend(&["run", "--manifest", s(&manifest), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least three visits"));

    let missing = neurotrend(&["trend", "--csv", s(&dir.path().join("none.csv"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(neurotrend(&["run"]).status.code(), Some(2));
    assert_eq!(neurotrend(&["bogus"]).status.code(), Some(2));

    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"patients": 2, "visits": 2}"#).unwrap();
    let bad = neurotrend(&["phantom", "--spec", s(&spec), "--out", s(&dir.path().join("p"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn phantom_subcommand_writes_volume_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"dims":[24,24,24],"spacing_mm":[2,2,2],"tissue_means":[500,2000,2500],"noise_sigma":100,
            "wm_semi_axes":[4,5,4],"gm_semi_axes":[6,7,6],"csf_semi_axes":[8,9,8],
            "skull_semi_axes":[10,11,10],"seed":3}"#,
    )
    .unwrap();
    let out = dir.path().join("ph");
    assert_eq!(neurotrend(&["phantom", "--spec", s(&spec), "--out", s(&out)]).status.code(), Some(0));
    assert!(out.join("phantom.nii.gz").exists());
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("phantom.truth.json")).unwrap()).unwrap();
    assert!(truth["volumes_ml"]["gm"].as_f64().unwrap() > 0.0);
}

#[test]
fn run_reports_partial_failure_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("cohort.json");
    fs::write(
        &spec,
        r#"{"patients": 1, "visits": 3, "gm_atrophy_per_visit": 0.08, "csf_growth_per_visit": 0.08,
            "bias_length_scale_mm": 32, "max_translation_mm": 1, "max_rotation_deg": 2,
            "base": {"dims":[40,40,40],"spacing_mm":[3,3,3],"tissue_means":[500,2000,2500],"noise_sigma":50,
                     "wm_semi_axes":[10,12,8],"gm_semi_axes":[13,15,11],"csf_semi_axes":[15,17,13],
                     "skull_semi_axes":[17,19,15],"seed":1}}"#,
    )
    .unwrap();
    let cohort = dir.path().join("cohort");
    assert_eq!(neurotrend(&["phantom", "--spec", s(&spec), "--out", s(&cohort)]).status.code(), Some(0));

    let out = dir.path().join("out");
    let manifest = cohort.join("manifest.json");
    let ok = neurotrend(&["run", "--manifest", s(&manifest), "--out", s(&out), "--workers", "1"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let trend = fs::read_to_string(out.join("trend.csv")).unwrap();
    assert!(trend.contains("P01,GM,3,-3,"), "{trend}");

    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m["patients"]
        .as_array_mut()
        .unwrap()
        .push(serde_json::json!({"id": "GONE", "visits": ["x.nii", "y.nii", "z.nii"]}));
    fs::write(&manifest, m.to_string()).unwrap();
    let partial = neurotrend(&["run", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(partial.status.code(), Some(1));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"status\": \"failed\""));
}
