//! Multiplicative intensity inhomogeneity estimation and removal.
//!
//! Works in the log domain, where the image model `v = u · f` becomes
//! additive. Each iteration sharpens the current corrected log-intensities
//! onto a few tissue levels (one-dimensional k-means), treats what is left
//! over as field plus noise, and fits a smooth cubic B-spline to it. The
//! loop stops once an iteration's multiplicative update is nearly constant.

pub mod bspline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{BrainMask, Geometry, Volume3D};
use bspline::SplineFitter;

/// Intensity floor applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-3;
const SPLINE_DAMPING: f64 = 1e-6;
/// Tissue levels used when sharpening the corrected log-intensities.
const SHARPEN_CLASSES: usize = 3;

/// Strictly positive multiplicative field on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    geometry: Geometry,
    values: Vec<f64>,
}

impl BiasField {
    pub fn from_values(geometry: Geometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "field has {} values for {} voxels",
                values.len(),
                geometry.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidVolume(format!("bias field value {bad} is not positive")));
        }
        Ok(BiasField { geometry, values })
    }

    pub fn uniform(geometry: Geometry) -> Self {
        let n = geometry.len();
        BiasField {
            geometry,
            values: vec![1.0; n],
        }
    }

    /// Build from a log-field, exponentiating element-wise.
    pub fn from_log(geometry: Geometry, log_values: &[f64]) -> Result<Self> {
        Self::from_values(geometry, log_values.iter().map(|v| v.exp()).collect())
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn log_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.ln()).collect()
    }

    pub fn geometric_mean(&self) -> f64 {
        (self.values.iter().map(|v| v.ln()).sum::<f64>() / self.values.len() as f64).exp()
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(self.geometry.clone(), self.values.iter().map(|&v| v as f32).collect())
            .expect("field matches its geometry")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasParams {
    /// B-spline control point spacing in mm.
    pub control_spacing_mm: f64,
    pub max_iterations: usize,
    /// Stop when the coefficient of variation of an iteration's
    /// multiplicative update falls below this.
    pub tolerance: f64,
    /// Sharpen-and-fit rounds per iteration.
    pub smoothing_passes: usize,
    /// Coarse-to-fine levels; level `l` of `n` uses a control spacing of
    /// `control_spacing_mm · 2^(n-1-l)`. Each level runs its own
    /// convergence loop.
    pub fitting_levels: usize,
}

impl Default for BiasParams {
    fn default() -> Self {
        BiasParams {
            control_spacing_mm: 40.0,
            max_iterations: 50,
            tolerance: 1e-3,
            smoothing_passes: 1,
            fitting_levels: 3,
        }
    }
}

impl BiasParams {
    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        let max_spacing = geometry.spacing.iter().cloned().fold(0.0, f64::max);
        if !(self.control_spacing_mm > 2.0 * max_spacing) {
            return Err(Error::Parameter(format!(
                "control spacing {} mm must exceed twice the voxel spacing ({max_spacing} mm)",
                self.control_spacing_mm
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Parameter("bias tolerance must be positive".into()));
        }
        if self.max_iterations == 0 || self.smoothing_passes == 0 || self.fitting_levels == 0 {
            return Err(Error::Parameter("bias iterations, passes and levels must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BiasEstimate {
    pub field: BiasField,
    pub converged: bool,
    pub iterations: usize,
    /// Update coefficient of variation after each iteration.
    pub history: Vec<f64>,
}

/// Replace each value by the center of its nearest tissue level.
fn sharpen(corrected: &[f64]) -> Vec<f64> {
    let mut buf = corrected.to_vec();
    let seeds: Vec<f64> = (1..=SHARPEN_CLASSES)
        .map(|c| {
            let p = 100.0 * c as f64 / (SHARPEN_CLASSES + 1) as f64;
            stats::percentile_in_place(&mut buf, p)
        })
        .collect();
    let km = stats::kmeans_1d(corrected, &seeds, 100);
    km.assignment.iter().map(|&a| km.centers[a]).collect()
}

/// Estimate the multiplicative field of `vol` from the voxels in `mask`
/// (all voxels above the log floor when `mask` is `None`).
///
/// Reaching `max_iterations` is not an error; check
/// [`BiasEstimate::converged`].
pub fn estimate_bias_field(vol: &Volume3D, mask: Option<&BrainMask>, params: &BiasParams) -> Result<BiasEstimate> {
    let geometry = vol.geometry();
    params.validate(geometry)?;
    let fit_mask = match mask {
        Some(m) => {
            geometry.check_same(m.geometry(), "bias mask")?;
            let bits = m
                .bits()
                .iter()
                .zip(vol.data())
                .map(|(&b, &v)| b && v as f64 > LOG_FLOOR)
                .collect();
            BrainMask::new(geometry.clone(), bits)?
        }
        None => BrainMask::from_threshold(vol, LOG_FLOOR as f32),
    };
    if fit_mask.is_empty() {
        return Err(Error::Input("no positive voxels inside the bias-estimation mask".into()));
    }

    let idx: Vec<usize> = fit_mask.indices().collect();
    let log_v: Vec<f64> = idx
        .iter()
        .map(|&i| (vol.data()[i] as f64).max(LOG_FLOOR).ln())
        .collect();

    let mut log_field = vec![0.0f64; geometry.len()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for level in 0..params.fitting_levels {
        let spacing = params.control_spacing_mm * f64::powi(2.0, (params.fitting_levels - 1 - level) as i32);
        let fitter = SplineFitter::new(geometry, &fit_mask, spacing, SPLINE_DAMPING)?;
        // Carry the coarser estimate over as this level's starting point.
        let start: Vec<f64> = idx.iter().map(|&i| log_field[i]).collect();
        let mut coeffs = fitter.fit(&start);
        log_field = fitter.evaluate(&coeffs);
        converged = false;
        for _ in 0..params.max_iterations {
            iterations += 1;
            let previous = log_field.clone();
            for _ in 0..params.smoothing_passes {
                let corrected: Vec<f64> = idx.iter().zip(&log_v).map(|(&i, &l)| l - log_field[i]).collect();
                let tissue = sharpen(&corrected);
                let residual: Vec<f64> = corrected.iter().zip(&tissue).map(|(c, t)| c - t).collect();
                let delta = fitter.fit(&residual);
                coeffs.iter_mut().zip(&delta).for_each(|(c, d)| *c += d);
                log_field = fitter.evaluate(&coeffs);
            }
            // CV of exp(new - old) over the fitting mask.
            let ratios = idx.iter().map(|&i| (log_field[i] - previous[i]).exp());
            let (mean, sd) = stats::mean_std(ratios);
            let cv = sd / mean;
            history.push(cv);
            log::debug!("bias level {level} iteration {iterations}: update cv {cv:.3e}");
            if cv < params.tolerance {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!("bias field estimate did not converge in {iterations} iterations");
    }

    let offset = log_field.iter().sum::<f64>() / log_field.len() as f64;
    log_field.iter_mut().for_each(|v| *v -= offset);
    Ok(BiasEstimate {
        field: BiasField::from_log(geometry.clone(), &log_field)?,
        converged,
        iterations,
        history,
    })
}

/// Divide out a field everywhere on the grid.
pub fn correct_bias(vol: &Volume3D, field: &BiasField) -> Result<Volume3D> {
    vol.geometry().check_same(field.geometry(), "bias correction")?;
    let data = vol
        .data()
        .iter()
        .zip(field.values())
        .map(|(&v, &f)| (v as f64 / f) as f32)
        .collect();
    vol.with_data(data)
}

/// Coefficient of variation (population std / mean) of `cur / prev`, over
/// `mask` or the whole grid.
pub fn field_update_cv(prev: &BiasField, cur: &BiasField, mask: Option<&BrainMask>) -> Result<f64> {
    prev.geometry().check_same(cur.geometry(), "field update")?;
    if let Some(m) = mask {
        prev.geometry().check_same(m.geometry(), "field update mask")?;
    }
    let ratios = prev
        .values()
        .iter()
        .zip(cur.values())
        .enumerate()
        .filter(|(i, _)| mask.map_or(true, |m| m.get(*i)))
        .map(|(_, (p, c))| c / p);
    let (mean, sd) = stats::mean_std(ratios);
    if mean.is_nan() {
        return Err(Error::Input("field update mask is empty".into()));
    }
    Ok(sd / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{apply_bias_field, generate_phantom, PhantomSpec};

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [32, 32, 32],
            spacing_mm: [4.0; 3],
            wm_semi_axes: [6.0, 8.0, 6.0],
            gm_semi_axes: [9.0, 11.0, 9.0],
            csf_semi_axes: [11.0, 13.0, 11.0],
            skull_semi_axes: [13.0, 15.0, 13.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn constant_volume_yields_unit_field() {
        let g = Geometry::new([16, 16, 16], [2.0; 3]).unwrap();
        let vol = Volume3D::filled(g, 800.0).unwrap();
        let est = estimate_bias_field(&vol, None, &BiasParams::default()).unwrap();
        assert!(est.converged);
        assert!(est.field.values().iter().all(|&f| (f - 1.0).abs() < 1e-3));
    }

    #[test]
    fn field_is_positive_with_unit_geometric_mean() {
        let (u, gt) = generate_phantom(&small_spec()).unwrap();
        let (v, _) = apply_bias_field(&u, 0.2, 64.0, 5).unwrap();
        let est = estimate_bias_field(&v, Some(&gt.brain_mask()), &BiasParams::default()).unwrap();
        assert!(est.field.values().iter().all(|&f| f > 0.0));
        assert!((est.field.geometric_mean() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn correct_bias_examples() {
        let g = Geometry::new([2, 1, 1], [1.0; 3]).unwrap();
        let vol = Volume3D::new(g.clone(), vec![10.0, 3.0]).unwrap();
        assert_eq!(correct_bias(&vol, &BiasField::uniform(g.clone())).unwrap(), vol);
        let f = BiasField::from_values(g, vec![2.0, 1.0]).unwrap();
        assert_eq!(correct_bias(&vol, &f).unwrap().data(), &[5.0, 3.0]);

        let other = BiasField::uniform(Geometry::new([3, 1, 1], [1.0; 3]).unwrap());
        assert!(matches!(correct_bias(&vol, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn update_cv_examples() {
        let g = Geometry::new([4, 1, 1], [1.0; 3]).unwrap();
        let a = BiasField::from_values(g.clone(), vec![1.0, 2.0, 0.5, 1.5]).unwrap();
        assert_eq!(field_update_cv(&a, &a, None).unwrap(), 0.0);
        let doubled = BiasField::from_values(g.clone(), a.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!(field_update_cv(&a, &doubled, None).unwrap() < 1e-15);

        let one = BiasField::uniform(g.clone());
        let mixed = BiasField::from_values(g, vec![1.0, 1.1, 1.0, 1.1]).unwrap();
        let cv = field_update_cv(&one, &mixed, None).unwrap();
        assert!((cv - 0.05 / 1.05).abs() < 1e-12, "{cv}");
    }

    #[test]
    fn empty_mask_and_bad_params_are_errors() {
        let g = Geometry::new([8, 8, 8], [1.0; 3]).unwrap();
        let vol = Volume3D::filled(g.clone(), 0.0).unwrap();
        assert!(matches!(
            estimate_bias_field(&vol, None, &BiasParams::default()),
            Err(Error::Input(_))
        ));
        let vol = Volume3D::filled(g, 1.0).unwrap();
        let p = BiasParams {
            control_spacing_mm: 1.5,
            ..BiasParams::default()
        };
        assert!(matches!(estimate_bias_field(&vol, None, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let (u, gt) = generate_phantom(&small_spec()).unwrap();
        let (v, _) = apply_bias_field(&u, 0.2, 64.0, 5).unwrap();
        let p = BiasParams {
            max_iterations: 1,
            tolerance: 1e-12,
            ..BiasParams::default()
        };
        let est = estimate_bias_field(&v, Some(&gt.brain_mask()), &p).unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, p.fitting_levels);
        assert_eq!(est.history.len(), p.fitting_levels);
    }
}
