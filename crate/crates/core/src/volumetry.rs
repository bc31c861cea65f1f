//! Tissue volumes from probability maps, per-visit records, max-scaled plot
//! series and cohort mean/std tables.

use std::fmt;
use std::io::Read;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::TissueProbabilityMaps;

/// Default probability threshold for counting a voxel as tissue.
pub const DEFAULT_PVE_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tissue {
    #[serde(rename = "CSF")]
    Csf,
    #[serde(rename = "GM")]
    Gm,
    #[serde(rename = "WM")]
    Wm,
}

impl Tissue {
    /// In class order (ascending T1 intensity), matching `_pve0.._pve2`.
    pub const ALL: [Tissue; 3] = [Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tissue::Csf => "CSF",
            Tissue::Gm => "GM",
            Tissue::Wm => "WM",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Tissue::Csf => "Cerebrospinal Fluid",
            Tissue::Gm => "Grey Matter",
            Tissue::Wm => "White Matter",
        }
    }
}

impl fmt::Display for Tissue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!("pve threshold {threshold} must lie in (0, 1)")));
    }
    Ok(())
}

/// Volume in mL of the voxels whose probability is strictly above
/// `threshold`.
///
/// ```
/// use neurotrend::volumetry::tissue_volume_ml;
/// let map = vec![1.0; 1000];
/// assert_eq!(tissue_volume_ml(&map, 1.0, 0.4).unwrap(), 1.0);
/// assert_eq!(tissue_volume_ml(&[0.4], 1000.0, 0.4).unwrap(), 0.0);
/// ```
pub fn tissue_volume_ml(map: &[f64], voxel_vol_mm3: f64, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    let count = map.iter().filter(|&&p| p > threshold).count();
    Ok(count as f64 * voxel_vol_mm3 / 1000.0)
}

/// CSF, GM and WM volumes in mL, each map thresholded independently.
pub fn visit_volumes(maps: &TissueProbabilityMaps, threshold: f64) -> Result<[f64; 3]> {
    let vv = maps.geometry().voxel_volume_mm3();
    let mut out = [0.0; 3];
    for t in Tissue::ALL {
        out[t.index()] = tissue_volume_ml(maps.map(t), vv, threshold)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    /// 1-based.
    pub visit: usize,
    /// Indexed by [`Tissue::index`].
    pub volumes_ml: [f64; 3],
    pub voxel_volume_mm3: f64,
    pub source: PathBuf,
}

impl VisitRecord {
    pub fn volume(&self, t: Tissue) -> f64 {
        self.volumes_ml[t.index()]
    }
}

/// Divide a series by its maximum.
///
/// ```
/// use neurotrend::volumetry::max_scale;
/// assert_eq!(max_scale(&[2.0, 4.0, 8.0]).unwrap(), vec![0.25, 0.5, 1.0]);
/// ```
pub fn max_scale(series: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Scale("cannot scale an empty series".into()));
    }
    let max = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Scale(format!("series maximum {max} is not positive")));
    }
    Ok(series.iter().map(|v| v / max).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisitStats {
    pub visit: usize,
    pub count: usize,
    pub mean_ml: [f64; 3],
    pub std_ml: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortStats {
    /// One entry per visit index that any patient has, ascending.
    pub visits: Vec<VisitStats>,
}

/// Per-visit mean and sample standard deviation over the patients having
/// that visit. A single patient gives a standard deviation of 0.
pub fn cohort_stats(records: &[VisitRecord]) -> Result<CohortStats> {
    if records.is_empty() {
        return Err(Error::Input("no visit records".into()));
    }
    let max_visit = records.iter().map(|r| r.visit).max().unwrap_or(0);
    let mut visits = Vec::new();
    for visit in 1..=max_visit {
        let rows: Vec<&VisitRecord> = records.iter().filter(|r| r.visit == visit).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let mut mean_ml = [0.0; 3];
        let mut std_ml = [0.0; 3];
        for t in 0..3 {
            let m = rows.iter().map(|r| r.volumes_ml[t]).sum::<f64>() / n;
            mean_ml[t] = m;
            if rows.len() > 1 {
                let ss: f64 = rows.iter().map(|r| (r.volumes_ml[t] - m).powi(2)).sum();
                std_ml[t] = (ss / (n - 1.0)).sqrt();
            }
        }
        visits.push(VisitStats {
            visit,
            count: rows.len(),
            mean_ml,
            std_ml,
        });
    }
    Ok(CohortStats { visits })
}

/// Fixed four-decimal rendering with trailing zeros trimmed, so that
/// floating noise from `count · voxel / 1000` never reaches the reports.
pub fn format_ml(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `patient_id,visit,csf_ml,gm_ml,wm_ml`
pub fn volumes_csv(records: &[VisitRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", "visit", "csf_ml", "gm_ml", "wm_ml"])?;
    for r in records {
        w.write_record([
            r.patient_id.clone(),
            r.visit.to_string(),
            format_ml(r.volumes_ml[0]),
            format_ml(r.volumes_ml[1]),
            format_ml(r.volumes_ml[2]),
        ])?;
    }
    finish(w)
}

/// `patient_id,visit,tissue,scaled_volume`, each patient's tissue series
/// divided by its own maximum. Records must be grouped by patient in visit
/// order. A series that is zero throughout has no scale and is left out.
pub fn plot_csv(records: &[VisitRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", "visit", "tissue", "scaled_volume"])?;
    for group in group_by_patient(records) {
        let scaled: Vec<Option<Vec<f64>>> = Tissue::ALL
            .iter()
            .map(|t| max_scale(&group.iter().map(|r| r.volume(*t)).collect::<Vec<_>>()).ok())
            .collect();
        for (k, r) in group.iter().enumerate() {
            for t in Tissue::ALL {
                if let Some(series) = &scaled[t.index()] {
                    w.write_record([
                        r.patient_id.clone(),
                        r.visit.to_string(),
                        t.as_str().to_string(),
                        format!("{:.6}", series[k]),
                    ])?;
                }
            }
        }
    }
    finish(w)
}

/// Tissue blocks (GM, CSF, WM) with "Volume (mL)" and "Std. Dev." rows and
/// one column per visit. Visits nobody reached are left blank.
pub fn cohort_table_csv(stats: &CohortStats) -> Result<String> {
    let max_visit = stats.visits.iter().map(|v| v.visit).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["tissue".to_string(), "statistic".to_string()];
    header.extend((1..=max_visit).map(|v| format!("Visit {v}")));
    w.write_record(&header)?;
    for t in [Tissue::Gm, Tissue::Csf, Tissue::Wm] {
        for (label, pick) in [("Volume (mL)", 0usize), ("Std. Dev.", 1)] {
            let mut row = vec![t.long_name().to_string(), label.to_string()];
            for v in 1..=max_visit {
                row.push(match stats.visits.iter().find(|s| s.visit == v) {
                    Some(s) if pick == 0 => format!("{:.2}", s.mean_ml[t.index()]),
                    Some(s) => format!("{:.2}", s.std_ml[t.index()]),
                    None => String::new(),
                });
            }
            w.write_record(&row)?;
        }
    }
    finish(w)
}

/// Split consecutive records into per-patient runs.
pub fn group_by_patient(records: &[VisitRecord]) -> Vec<&[VisitRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].patient_id != records[start].patient_id {
            if i > start {
                out.push(&records[start..i]);
            }
            start = i;
        }
    }
    out
}

#[derive(Deserialize)]
struct VolumeRow {
    patient_id: String,
    visit: usize,
    csf_ml: f64,
    gm_ml: f64,
    wm_ml: f64,
}

/// Parse a volumes CSV. Each patient's rows must be contiguous with visit
/// numbers (1-based) strictly increasing; gaps are allowed, since visits
/// that failed processing are omitted.
pub fn read_volumes_csv(reader: impl Read) -> Result<Vec<VisitRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut records: Vec<VisitRecord> = Vec::new();
    for row in rdr.deserialize() {
        let row: VolumeRow = row?;
        let min_visit = match records.last() {
            Some(prev) if prev.patient_id == row.patient_id => prev.visit + 1,
            _ => {
                if records.iter().any(|r| r.patient_id == row.patient_id) {
                    return Err(Error::Input(format!("rows for patient {} are not contiguous", row.patient_id)));
                }
                1
            }
        };
        if row.visit < min_visit {
            return Err(Error::Input(format!(
                "patient {}: visit {} out of order (expected at least {min_visit})",
                row.patient_id, row.visit
            )));
        }
        let volumes_ml = [row.csf_ml, row.gm_ml, row.wm_ml];
        if volumes_ml.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input(format!("patient {}: invalid volume", row.patient_id)));
        }
        records.push(VisitRecord {
            patient_id: row.patient_id,
            visit: row.visit,
            volumes_ml,
            voxel_volume_mm3: f64::NAN,
            source: PathBuf::new(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;

    fn rec(id: &str, visit: usize, v: [f64; 3]) -> VisitRecord {
        VisitRecord {
            patient_id: id.into(),
            visit,
            volumes_ml: v,
            voxel_volume_mm3: 1.0,
            source: PathBuf::new(),
        }
    }

    #[test]
    fn volume_examples() {
        assert_eq!(tissue_volume_ml(&vec![1.0; 1000], 1.0, 0.4).unwrap(), 1.0);
        assert_eq!(tissue_volume_ml(&[0.4, 0.41], 1000.0, 0.4).unwrap(), 1.0);
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(tissue_volume_ml(&[0.5], 1.0, bad), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn visit_volume_examples() {
        let g = Geometry::new([30, 10, 10], [1.0; 3]).unwrap();
        let zero = TissueProbabilityMaps::new(g.clone(), [vec![0.0; 3000], vec![0.0; 3000], vec![0.0; 3000]]).unwrap();
        assert_eq!(visit_volumes(&zero, 0.4).unwrap(), [0.0; 3]);

        let mut maps = [vec![0.0; 3000], vec![0.0; 3000], vec![0.0; 3000]];
        for i in 0..3000 {
            maps[i % 3][i] = 1.0;
        }
        let maps = TissueProbabilityMaps::new(g, maps).unwrap();
        assert_eq!(visit_volumes(&maps, 0.4).unwrap(), [1.0; 3]);
    }

    #[test]
    fn max_scale_examples() {
        assert_eq!(max_scale(&[5.0, 5.0, 5.0]).unwrap(), vec![1.0; 3]);
        assert!(matches!(max_scale(&[0.0, 0.0]), Err(Error::Scale(_))));
        assert!(matches!(max_scale(&[]), Err(Error::Scale(_))));
    }

    #[test]
    fn cohort_examples() {
        let s = cohort_stats(&[rec("a", 1, [1.0, 2.0, 3.0]), rec("a", 2, [1.0, 2.0, 3.0])]).unwrap();
        assert!(s.visits.iter().all(|v| v.std_ml == [0.0; 3] && v.count == 1));

        let s = cohort_stats(&[rec("a", 1, [0.0, 500.0, 0.0]), rec("b", 1, [0.0, 600.0, 0.0])]).unwrap();
        assert_eq!(s.visits[0].mean_ml[1], 550.0);
        // √((50² + 50²) / 1)
        assert!((s.visits[0].std_ml[1] - 5000f64.sqrt()).abs() < 1e-12);
        assert!((s.visits[0].std_ml[1] - 70.71).abs() < 5e-3);

        assert!(matches!(cohort_stats(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn table_layout_matches_published_fixture() {
        let stats = CohortStats {
            visits: vec![VisitStats {
                visit: 1,
                count: 15,
                mean_ml: [379.31, 554.21, 547.21],
                std_ml: [61.29, 57.08, 68.28],
            }],
        };
        let csv = cohort_table_csv(&stats).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "tissue,statistic,Visit 1");
        assert_eq!(lines[1], "Grey Matter,Volume (mL),554.21");
        assert_eq!(lines[2], "Grey Matter,Std. Dev.,57.08");
        assert_eq!(lines[3], "Cerebrospinal Fluid,Volume (mL),379.31");
        assert_eq!(lines[6], "White Matter,Std. Dev.,68.28");
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![
            rec("p1", 1, [300.25, 554.21, 500.0]),
            rec("p1", 2, [310.0, 536.83, 499.5]),
            rec("p2", 1, [0.0, 1.0, 2.0]),
        ];
        let text = volumes_csv(&recs).unwrap();
        assert!(text.starts_with("patient_id,visit,csf_ml,gm_ml,wm_ml\n"));
        assert!(text.contains("p1,1,300.25,554.21,500\n"));
        let back = read_volumes_csv(text.as_bytes()).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.volumes_ml, b.volumes_ml);
            assert_eq!((a.visit, &a.patient_id), (b.visit, &b.patient_id));
        }
        for bad in ["p,0,1,1,1\n", "p,2,1,1,1\np,2,1,1,1\n", "p,1,1,1,1\nq,1,1,1,1\np,2,1,1,1\n"] {
            let text = format!("patient_id,visit,csf_ml,gm_ml,wm_ml\n{bad}");
            assert!(matches!(read_volumes_csv(text.as_bytes()), Err(Error::Input(_))), "{bad}");
        }
        let gap = "patient_id,visit,csf_ml,gm_ml,wm_ml\np,1,1,1,1\np,3,1,1,1\n";
        assert_eq!(read_volumes_csv(gap.as_bytes()).unwrap()[1].visit, 3);
    }

    #[test]
    fn plot_rows_are_scaled_per_patient() {
        let recs = vec![rec("p", 1, [2.0, 8.0, 1.0]), rec("p", 2, [4.0, 4.0, 1.0])];
        let text = plot_csv(&recs).unwrap();
        assert!(text.contains("p,1,CSF,0.500000\n"));
        assert!(text.contains("p,2,GM,0.500000\n"));
        assert!(text.contains("p,2,WM,1.000000\n"));
        let zero = plot_csv(&[rec("q", 1, [0.0, 1.0, 1.0])]).unwrap();
        assert!(!zero.contains("CSF") && zero.contains("q,1,GM,1.000000"));
    }

    #[test]
    fn format_trims() {
        assert_eq!(format_ml(554.2100000000001), "554.21");
        assert_eq!(format_ml(500.0), "500");
        assert_eq!(format_ml(0.00001), "0");
    }

    proptest! {
        #[test]
        fn volume_monotone_in_threshold(map in prop::collection::vec(0.0f64..=1.0, 1..200), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(tissue_volume_ml(&map, 1.0, hi).unwrap() <= tissue_volume_ml(&map, 1.0, lo).unwrap());
        }

        #[test]
        fn max_scale_peak_and_scale_invariance(series in prop::collection::vec(0.001f64..1e4, 1..20), k in 0.01f64..100.0) {
            let s = max_scale(&series).unwrap();
            prop_assert_eq!(s.iter().cloned().fold(f64::MIN, f64::max), 1.0);
            let scaled: Vec<f64> = series.iter().map(|v| v * k).collect();
            for (a, b) in s.iter().zip(max_scale(&scaled).unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn at_most_two_classes_per_voxel(p in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..100)) {
            let g = Geometry::new([p.len(), 1, 1], [1.0; 3]).unwrap();
            let mut maps = [vec![], vec![], vec![]];
            for (a, b, c) in &p {
                let s = a + b + c + 1e-9;
                maps[0].push(a / s);
                maps[1].push(b / s);
                maps[2].push(c / s);
            }
            let maps = TissueProbabilityMaps::new(g, maps).unwrap();
            let v = visit_volumes(&maps, 0.4).unwrap();
            prop_assert!((v.iter().sum::<f64>()) * 1000.0 <= 2.0 * p.len() as f64 + 1e-9);
        }
    }
}
