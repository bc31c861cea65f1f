//! File-level behaviour across modules: images, manifests and tables as
//! they appear on disk.

use std::fs;
use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;

use neurotrend::nifti::{encode_nifti, read_nifti, write_nifti};
use neurotrend::phantom::{generate_phantom, PhantomSpec};
use neurotrend::pipeline::{write_phantom, CohortPhantomSpec, Manifest, PhantomJob};
use neurotrend::trend::{cohort_trends, trend_csv, Direction, TrendOptions};
use neurotrend::volumetry::{read_volumes_csv, Tissue};
use neurotrend::{Error, Geometry, Volume3D};

#[test]
fn gzip_is_detected_by_content_not_extension() {
    let dir = tempfile::tempdir().unwrap();
    let g = Geometry::new([3, 4, 5], [1.0, 1.5, 2.0]).unwrap();
    let vol = Volume3D::from_fn(g, |i, j, k| (i * j + k) as f32 - 3.5).unwrap();

    let mut gz = GzEncoder::new(Vec::new(), Compression::default());
    gz.write_all(&encode_nifti(&vol)).unwrap();
    let path = dir.path().join("misnamed.nii");
    fs::write(&path, gz.finish().unwrap()).unwrap();

    assert_eq!(read_nifti(&path).unwrap().data(), vol.data());
}

#[test]
fn truncated_and_missing_images_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (vol, _) = generate_phantom(&PhantomSpec::small()).unwrap();
    let bytes = encode_nifti(&vol);
    let path = dir.path().join("cut.nii");
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(read_nifti(&path).is_err());
    assert!(matches!(read_nifti(dir.path().join("absent.nii")), Err(Error::Io { .. })));
}

#[test]
fn phantom_written_to_disk_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::small();
    let truth = write_phantom(&spec, dir.path()).unwrap();
    let (vol, expected) = generate_phantom(&spec).unwrap();
    assert_eq!(truth.labels, expected.labels);
    let back = read_nifti(dir.path().join("phantom.nii.gz")).unwrap();
    assert_eq!(back.data(), vol.data());
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("phantom.truth.json")).unwrap()).unwrap();
    assert!(sidecar["volumes_ml"]["gm"].as_f64().unwrap() > 0.0);
}

#[test]
fn phantom_documents_dispatch_on_shape() {
    let single = serde_json::to_string(&PhantomSpec::small()).unwrap();
    assert!(matches!(PhantomJob::from_json(&single).unwrap(), PhantomJob::Single(_)));
    assert!(matches!(PhantomJob::from_json(r#"{"patients": 2}"#).unwrap(), PhantomJob::Cohort(_)));
    assert!(PhantomJob::from_json(r#"{"dims": [8, 8, 8]}"#).is_err());
}

#[test]
fn written_cohort_manifest_loads_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CohortPhantomSpec {
        base: PhantomSpec::small(),
        patients: 2,
        visits: 3,
        ..CohortPhantomSpec::default()
    };
    let written = spec.write(dir.path()).unwrap();
    let loaded = Manifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, written);
    for p in &loaded.patients {
        assert_eq!(p.visits.len(), 3);
        for v in &p.visits {
            assert_eq!(read_nifti(v).unwrap().dims(), [24, 24, 24]);
        }
    }
}

#[test]
fn manifest_errors_are_reported_as_such() {
    let short = r#"{"patients": [{"id": "A", "visits": ["1.nii", "2.nii"]}]}"#;
    assert!(matches!(Manifest::from_json(short, None), Err(Error::Manifest(_))));
    let extra = r#"{"patients": [], "notes": 1}"#;
    assert!(matches!(Manifest::from_json(extra, None), Err(Error::Manifest(_))));
}

#[test]
fn volumes_table_to_trend_table() {
    let table = "patient_id,visit,csf_ml,gm_ml,wm_ml\n\
                 A,1,480,554.21,470\n\
                 A,2,495,536.83,470.4\n\
                 A,3,510,526.15,469.8\n\
                 A,4,530,497.34,470.2\n\
                 B,1,500,520,480\n\
                 B,2,501,519,480\n";
    let records = read_volumes_csv(table.as_bytes()).unwrap();
    let (rows, skipped) = cohort_trends(&records, &TrendOptions::default()).unwrap();
    assert_eq!(skipped, vec!["B".to_string()]);
    assert_eq!(rows.len(), 3);
    let gm = rows.iter().find(|r| r.tissue == Tissue::Gm).unwrap();
    assert_eq!(gm.result.direction, Direction::Decreasing);
    let wm = rows.iter().find(|r| r.tissue == Tissue::Wm).unwrap();
    assert_eq!(wm.result.direction, Direction::NoTrend);

    let csv = trend_csv(&rows).unwrap();
    assert!(csv.contains("A,GM,4,-6,8.667,-1.6984,95.54,decreasing"), "{csv}");
}

#[test]
fn written_volume_survives_rewrite_cycles() {
    let dir = tempfile::tempdir().unwrap();
    let (vol, _) = generate_phantom(&PhantomSpec::small()).unwrap();
    let a = dir.path().join("a.nii.gz");
    let b = dir.path().join("b.nii.gz");
    write_nifti(&vol, &a).unwrap();
    write_nifti(&read_nifti(&a).unwrap(), &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}
