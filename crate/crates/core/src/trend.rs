//! Modified Mann-Kendall trend test over per-visit tissue volumes.
//!
//! Pairwise differences within a ±dead band (1 mL by default) count as
//! ties, the statistic is standardized with the untied variance and a
//! continuity correction, and the result is reported as a direction plus a
//! one-sided confidence.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumetry::{group_by_patient, Tissue, VisitRecord};

pub const DEFAULT_DEADBAND_ML: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Increasing,
    Decreasing,
    NoTrend,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Increasing => "increasing",
            Direction::Decreasing => "decreasing",
            Direction::NoTrend => "no-trend",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How |z| is turned into a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    /// Φ at |z| rounded up to the next hundredth, as read from a printed
    /// two-decimal normal table. Reproduces the published 95.54% / 85.31%.
    #[default]
    Table,
    /// Φ(|z|) directly.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrendOptions {
    pub deadband_ml: f64,
    pub confidence: ConfidenceMode,
}

impl Default for TrendOptions {
    fn default() -> Self {
        TrendOptions {
            deadband_ml: DEFAULT_DEADBAND_ML,
            confidence: ConfidenceMode::Table,
        }
    }
}

/// One patient's volumes for one tissue, in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalSeries {
    pub patient_id: String,
    pub tissue: Tissue,
    volumes: Vec<f64>,
}

impl LongitudinalSeries {
    pub fn new(patient_id: impl Into<String>, tissue: Tissue, volumes: Vec<f64>) -> Result<Self> {
        check_len(volumes.len())?;
        if volumes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("series contains a non-finite volume".into()));
        }
        Ok(LongitudinalSeries {
            patient_id: patient_id.into(),
            tissue,
            volumes,
        })
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrendResult {
    pub s: i64,
    pub var_s: f64,
    pub z_vol: f64,
    pub confidence_pct: f64,
    pub direction: Direction,
}

fn check_len(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::SeriesTooShort { len: n });
    }
    Ok(())
}

/// Dead-band sign: ±1 outside `[-deadband, deadband]`, 0 inside (inclusive).
///
/// ```
/// use neurotrend::trend::mk_sign;
/// assert_eq!(mk_sign(2.0, 1.0), 1);
/// assert_eq!(mk_sign(1.0, 1.0), 0);
/// assert_eq!(mk_sign(-1.5, 1.0), -1);
/// ```
pub fn mk_sign(diff: f64, deadband: f64) -> i64 {
    if diff > deadband {
        1
    } else if diff < -deadband {
        -1
    } else {
        0
    }
}

/// S = Σ_{k<j} sgn(x_j − x_k).
pub fn mk_statistic(volumes: &[f64], deadband: f64) -> Result<i64> {
    check_len(volumes.len())?;
    let mut s = 0;
    for k in 0..volumes.len() - 1 {
        for j in k + 1..volumes.len() {
            s += mk_sign(volumes[j] - volumes[k], deadband);
        }
    }
    Ok(s)
}

/// n(n−1)(2n+5)/18, without a tie correction.
pub fn mk_variance(n: usize) -> Result<f64> {
    check_len(n)?;
    let n = n as f64;
    Ok(n * (n - 1.0) * (2.0 * n + 5.0) / 18.0)
}

/// Continuity-corrected z, confidence in percent, and direction.
pub fn z_and_confidence(s: i64, var_s: f64, mode: ConfidenceMode) -> Result<(f64, f64, Direction)> {
    if !(var_s > 0.0) || !var_s.is_finite() {
        return Err(Error::Parameter(format!("variance {var_s} must be positive")));
    }
    let sd = var_s.sqrt();
    let z = match s {
        s if s > 0 => (s - 1) as f64 / sd,
        s if s < 0 => (s + 1) as f64 / sd,
        _ => 0.0,
    };
    let direction = if z > 0.0 {
        Direction::Increasing
    } else if z < 0.0 {
        Direction::Decreasing
    } else {
        Direction::NoTrend
    };
    let at = match mode {
        ConfidenceMode::Exact => z.abs(),
        // The small offset keeps values that are already whole hundredths
        // (up to rounding) from being pushed to the next one.
        ConfidenceMode::Table => (z.abs() * 100.0 - 1e-9).ceil().max(0.0) / 100.0,
    };
    let confidence = (100.0 * normal_cdf(at)).min(100.0 * (1.0 - f64::EPSILON));
    Ok((z, confidence, direction))
}

/// Full test on one series.
///
/// ```
/// use neurotrend::trend::{analyze_trend, Direction, LongitudinalSeries, TrendOptions};
/// use neurotrend::volumetry::Tissue;
///
/// let gm = LongitudinalSeries::new("cohort", Tissue::Gm, vec![554.21, 536.83, 526.15, 497.34]).unwrap();
/// let r = analyze_trend(&gm, &TrendOptions::default()).unwrap();
/// assert_eq!(r.s, -6);
/// assert!((r.z_vol + 1.698).abs() < 1e-3);
/// assert!((r.confidence_pct - 95.54).abs() < 0.01);
/// assert_eq!(r.direction, Direction::Decreasing);
/// ```
pub fn analyze_trend(series: &LongitudinalSeries, opts: &TrendOptions) -> Result<TrendResult> {
    if !(opts.deadband_ml >= 0.0) || !opts.deadband_ml.is_finite() {
        return Err(Error::Parameter(format!("dead band {} must be non-negative", opts.deadband_ml)));
    }
    let s = mk_statistic(series.volumes(), opts.deadband_ml)?;
    let var_s = mk_variance(series.len())?;
    let (z_vol, confidence_pct, direction) = z_and_confidence(s, var_s, opts.confidence)?;
    Ok(TrendResult {
        s,
        var_s,
        z_vol,
        confidence_pct,
        direction,
    })
}

/// Standard normal CDF (Hart's double-precision rational approximation,
/// switching to a continued fraction in the far tail).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x.abs();
    let tail = if z > 37.0 {
        0.0
    } else {
        let e = (-z * z / 2.0).exp();
        if z < 7.07106781186547 {
            let num = horner(
                z,
                &[
                    3.52624965998911e-02,
                    0.700383064443688,
                    6.37396220353165,
                    33.912866078383,
                    112.079291497871,
                    221.213596169931,
                    220.206867912376,
                ],
            );
            let den = horner(
                z,
                &[
                    8.83883476483184e-02,
                    1.75566716318264,
                    16.064177579207,
                    86.7807322029461,
                    296.564248779674,
                    637.333633378831,
                    793.826512519948,
                    440.413735824752,
                ],
            );
            e * num / den
        } else {
            let mut b = z + 0.65;
            b = z + 4.0 / b;
            b = z + 3.0 / b;
            b = z + 2.0 / b;
            b = z + 1.0 / b;
            e / b / 2.506628274631
        }
    };
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Polynomial with coefficients from the highest power down.
fn horner(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(0.0, |acc, c| acc * x + c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendRecord {
    pub patient_id: String,
    pub tissue: Tissue,
    pub n_visits: usize,
    pub result: TrendResult,
}

/// Trend rows for every patient with at least three visits, CSF/GM/WM per
/// patient. Patients with fewer visits are skipped and returned by id.
pub fn cohort_trends(records: &[VisitRecord], opts: &TrendOptions) -> Result<(Vec<TrendRecord>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for group in group_by_patient(records) {
        let id = &group[0].patient_id;
        if group.len() < 3 {
            skipped.push(id.clone());
            continue;
        }
        for t in Tissue::ALL {
            let series = LongitudinalSeries::new(id.clone(), t, group.iter().map(|r| r.volume(t)).collect())?;
            rows.push(TrendRecord {
                patient_id: id.clone(),
                tissue: t,
                n_visits: series.len(),
                result: analyze_trend(&series, opts)?,
            });
        }
    }
    Ok((rows, skipped))
}

/// `patient_id,tissue,n_visits,S,var_s,z_vol,confidence_pct,direction`
pub fn trend_csv(rows: &[TrendRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", "tissue", "n_visits", "S", "var_s", "z_vol", "confidence_pct", "direction"])?;
    for r in rows {
        w.write_record([
            r.patient_id.clone(),
            r.tissue.as_str().to_string(),
            r.n_visits.to_string(),
            r.result.s.to_string(),
            format!("{:.3}", r.result.var_s),
            format!("{:.4}", r.result.z_vol),
            format!("{:.2}", r.result.confidence_pct),
            r.result.direction.as_str().to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Φ from the power series Φ(x) = ½ + φ(x) Σ x^(2n+1)/(2n+1)!!, summed
    /// until the terms vanish; exact enough on [−6, 6] to judge 1e-7.
    fn phi_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-17 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= x * x / (2.0 * n + 1.0);
            sum += term;
        }
        0.5 + (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * sum
    }

    fn series(v: &[f64]) -> LongitudinalSeries {
        LongitudinalSeries::new("p", Tissue::Gm, v.to_vec()).unwrap()
    }

    #[test]
    fn cdf_matches_series_oracle() {
        let mut worst = 0.0f64;
        for i in -600..=600 {
            let x = i as f64 / 100.0;
            worst = worst.max((normal_cdf(x) - phi_series(x)).abs());
        }
        assert!(worst < 1e-7, "{worst}");
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!(normal_cdf(-40.0) == 0.0 && normal_cdf(40.0) == 1.0);
    }

    #[test]
    fn sign_examples() {
        assert_eq!(mk_sign(2.0, 1.0), 1);
        assert_eq!(mk_sign(1.0, 1.0), 0);
        assert_eq!(mk_sign(-1.0, 1.0), 0);
        assert_eq!(mk_sign(-1.5, 1.0), -1);
        assert_eq!(mk_sign(0.0, 0.0), 0);
    }

    #[test]
    fn statistic_examples() {
        assert_eq!(mk_statistic(&[554.21, 536.83, 526.15, 497.34], 1.0).unwrap(), -6);
        assert_eq!(mk_statistic(&[1.0, 3.0, 5.0], 1.0).unwrap(), 3);
        assert_eq!(mk_statistic(&[7.0; 5], 1.0).unwrap(), 0);
        assert!(matches!(mk_statistic(&[1.0, 2.0], 1.0), Err(Error::SeriesTooShort { len: 2 })));
    }

    #[test]
    fn variance_examples() {
        assert!((mk_variance(4).unwrap() - 8.667).abs() < 1e-3);
        assert!((mk_variance(3).unwrap() - 3.667).abs() < 1e-3);
        assert_eq!(mk_variance(10).unwrap(), 10.0 * 9.0 * 25.0 / 18.0);
        assert!(mk_variance(2).is_err());
    }

    #[test]
    fn published_four_and_three_visit_values() {
        let (z, c, d) = z_and_confidence(-6, mk_variance(4).unwrap(), ConfidenceMode::Table).unwrap();
        assert!((z + 1.698).abs() < 1e-3, "{z}");
        assert!((c - 95.54).abs() < 0.01, "{c}");
        assert_eq!(d, Direction::Decreasing);

        let (z, c, d) = z_and_confidence(-3, mk_variance(3).unwrap(), ConfidenceMode::Table).unwrap();
        assert!((z + 1.044).abs() < 5e-3, "{z}");
        assert!((c - 85.31).abs() < 0.01, "{c}");
        assert_eq!(d, Direction::Decreasing);

        let (z, c, d) = z_and_confidence(0, 3.667, ConfidenceMode::Table).unwrap();
        assert_eq!((z, c, d), (0.0, 50.0, Direction::NoTrend));
        // [100, 105, 102]: two rises and one fall.
        let s = mk_statistic(&[100.0, 105.0, 102.0], 1.0).unwrap();
        assert_eq!(s, 1);
        assert_eq!(z_and_confidence(s, 3.667, ConfidenceMode::Table).unwrap().2, Direction::NoTrend);
    }

    #[test]
    fn exact_mode_uses_unrounded_z() {
        let (z, c, _) = z_and_confidence(-6, mk_variance(4).unwrap(), ConfidenceMode::Exact).unwrap();
        assert!((c - 100.0 * phi_series(z.abs())).abs() < 1e-5);
        assert!(c < 95.54);
    }

    #[test]
    fn bad_variance_is_parameter_error() {
        for v in [0.0, -1.0, f64::NAN] {
            assert!(matches!(z_and_confidence(1, v, ConfidenceMode::Table), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn analyze_examples() {
        let opts = TrendOptions::default();
        let r = analyze_trend(&series(&[379.31, 387.44, 398.97, 410.72]), &opts).unwrap();
        assert_eq!(r.s, 6);
        assert!((r.z_vol - 1.698).abs() < 1e-3);
        assert!((r.confidence_pct - 95.54).abs() < 0.01);
        assert_eq!(r.direction, Direction::Increasing);

        let r = analyze_trend(&series(&[100.0, 100.5, 99.8]), &opts).unwrap();
        assert_eq!((r.s, r.direction), (0, Direction::NoTrend));

        let bad = TrendOptions {
            deadband_ml: -1.0,
            ..opts
        };
        assert!(matches!(analyze_trend(&series(&[1.0, 2.0, 3.0]), &bad), Err(Error::Parameter(_))));
        assert!(LongitudinalSeries::new("p", Tissue::Gm, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn cohort_rows_and_csv() {
        let rec = |id: &str, visit, gm| VisitRecord {
            patient_id: id.to_string(),
            visit,
            volumes_ml: [400.0 + 5.0 * visit as f64, gm, 500.0],
            voxel_volume_mm3: 1.0,
            source: Default::default(),
        };
        let recs = vec![
            rec("a", 1, 554.21),
            rec("a", 2, 536.83),
            rec("a", 3, 526.15),
            rec("a", 4, 497.34),
            rec("b", 1, 500.0),
            rec("b", 2, 490.0),
        ];
        let (rows, skipped) = cohort_trends(&recs, &TrendOptions::default()).unwrap();
        assert_eq!(skipped, vec!["b".to_string()]);
        assert_eq!(rows.len(), 3);
        let csv = trend_csv(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "patient_id,tissue,n_visits,S,var_s,z_vol,confidence_pct,direction");
        assert_eq!(lines[1], "a,CSF,4,6,8.667,1.6984,95.54,increasing");
        assert_eq!(lines[2], "a,GM,4,-6,8.667,-1.6984,95.54,decreasing");
        assert_eq!(lines[3], "a,WM,4,0,8.667,0.0000,50.00,no-trend");
    }

    /// Brute-force S: every ordered pair, no shared code with mk_statistic.
    fn brute_s(v: &[f64], band: f64) -> i64 {
        let mut s = 0;
        for (k, a) in v.iter().enumerate() {
            for b in &v[k + 1..] {
                let d = b - a;
                s += (d > band) as i64 - (d < -band) as i64;
            }
        }
        s
    }

    proptest! {
        #[test]
        fn antisymmetric_under_reversal(v in prop::collection::vec(0.0f64..1000.0, 3..12)) {
            let opts = TrendOptions::default();
            let fwd = analyze_trend(&series(&v), &opts).unwrap();
            let rev: Vec<f64> = v.iter().rev().cloned().collect();
            let back = analyze_trend(&series(&rev), &opts).unwrap();
            prop_assert_eq!(fwd.s, -back.s);
            prop_assert_eq!(fwd.s, brute_s(&v, 1.0));
            prop_assert_eq!(fwd.z_vol, -back.z_vol);
            if fwd.s.abs() > 1 {
                prop_assert_ne!(fwd.direction, back.direction);
            }
        }

        #[test]
        fn bounded_and_sign_consistent(v in prop::collection::vec(0.0f64..1000.0, 3..12), band in 0.0f64..5.0) {
            let opts = TrendOptions { deadband_ml: band, ..TrendOptions::default() };
            let r = analyze_trend(&series(&v), &opts).unwrap();
            let n = v.len() as i64;
            prop_assert!(r.s.abs() <= n * (n - 1) / 2);
            // The continuity correction maps |S| = 1 to z = 0 as well.
            prop_assert_eq!(r.z_vol == 0.0, r.s.abs() <= 1);
            prop_assert_eq!(r.z_vol > 0.0, r.s > 1);
            prop_assert_eq!(r.z_vol < 0.0, r.s < -1);
            prop_assert!(r.confidence_pct >= 50.0 && r.confidence_pct < 100.0);
            prop_assert_eq!(r.confidence_pct == 50.0, r.s.abs() <= 1);
        }

        #[test]
        fn offset_invariant(v in prop::collection::vec(0.0f64..1000.0, 3..12), c in -500.0f64..500.0) {
            let opts = TrendOptions::default();
            // Offsets that are exact in binary keep every difference identical.
            let c = (c * 4.0).round() / 4.0;
            let a = analyze_trend(&series(&v), &opts).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = analyze_trend(&series(&shifted), &opts).unwrap();
            prop_assert_eq!(a.s, b.s);
            prop_assert_eq!(a.z_vol, b.z_vol);
            prop_assert_eq!(a.confidence_pct, b.confidence_pct);
        }

        #[test]
        fn strict_monotone_hits_bound(start in 0.0f64..500.0, steps in prop::collection::vec(1.01f64..50.0, 2..10)) {
            let mut v = vec![start];
            for s in &steps {
                v.push(v.last().unwrap() + s);
            }
            let n = v.len() as i64;
            prop_assert_eq!(mk_statistic(&v, 1.0).unwrap(), n * (n - 1) / 2);
        }
    }
}
