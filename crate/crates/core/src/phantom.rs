//! Synthetic brain phantoms with exact ground truth.
//!
//! A phantom is a set of nested ellipsoids centered on the grid: a white
//! matter core, a grey matter shell, a CSF shell and a bright skull shell.
//! Labels are decided at voxel centers, so the ground-truth counts are exact
//! for whatever motion or atrophy is programmed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bias::BiasField;
use crate::error::{Error, Result};
use crate::registration::RigidTransform;
use crate::rng;
use crate::volume::{BrainMask, Geometry, Volume3D};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_CSF: u8 = 1;
pub const LABEL_GM: u8 = 2;
pub const LABEL_WM: u8 = 3;
pub const LABEL_SKULL: u8 = 4;

/// Skull intensity relative to the white-matter mean.
pub const SKULL_WM_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Mean intensities of CSF, GM and WM.
    pub tissue_means: [f64; 3],
    pub noise_sigma: f64,
    /// Semi-axes in voxels.
    pub wm_semi_axes: [f64; 3],
    pub gm_semi_axes: [f64; 3],
    pub csf_semi_axes: [f64; 3],
    pub skull_semi_axes: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// 64³ at 3 mm: a head-sized field of view with tissue volumes of
    /// roughly 500 mL each.
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing_mm: [3.0, 3.0, 3.0],
            tissue_means: [500.0, 2000.0, 2500.0],
            noise_sigma: 100.0,
            wm_semi_axes: [17.0, 20.0, 13.0],
            gm_semi_axes: [22.0, 25.0, 17.0],
            csf_semi_axes: [25.0, 28.0, 20.0],
            skull_semi_axes: [28.0, 31.0, 23.0],
            seed: 1,
        }
    }
}

impl PhantomSpec {
    /// 24³ at 2 mm; quick enough for examples and unit tests. Its 48 mm
    /// field of view is too small for the default bias-fit control grid.
    pub fn small() -> Self {
        PhantomSpec {
            dims: [24, 24, 24],
            spacing_mm: [2.0; 3],
            wm_semi_axes: [4.0, 5.0, 4.0],
            gm_semi_axes: [6.0, 7.0, 6.0],
            csf_semi_axes: [8.0, 9.0, 8.0],
            skull_semi_axes: [10.0, 11.0, 10.0],
            ..PhantomSpec::default()
        }
    }

    /// 40³ at 3 mm with σ = 50: the smallest grid whose tissue shells are
    /// at least two voxels thick everywhere and whose field of view fits the
    /// default bias-fit control grid.
    pub fn medium() -> Self {
        PhantomSpec {
            dims: [40, 40, 40],
            noise_sigma: 50.0,
            wm_semi_axes: [10.0, 12.0, 8.0],
            gm_semi_axes: [13.0, 15.0, 11.0],
            csf_semi_axes: [15.0, 17.0, 13.0],
            skull_semi_axes: [17.0, 19.0, 15.0],
            ..PhantomSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.dims, self.spacing_mm).map_err(|e| Error::Parameter(e.to_string()))?;
        let shells = [
            self.wm_semi_axes,
            self.gm_semi_axes,
            self.csf_semi_axes,
            self.skull_semi_axes,
        ];
        if shells.iter().flatten().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Parameter("semi-axes must be positive".into()));
        }
        for pair in shells.windows(2) {
            for a in 0..3 {
                if pair[0][a] >= pair[1][a] {
                    return Err(Error::Parameter(format!(
                        "semi-axes must be strictly nested WM < GM < CSF < skull, axis {a}: {} >= {}",
                        pair[0][a], pair[1][a]
                    )));
                }
            }
        }
        let [c, g, w] = self.tissue_means;
        if !(c < g && g < w) {
            return Err(Error::Parameter(format!(
                "tissue means must increase CSF < GM < WM, got {:?}",
                self.tissue_means
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!("noise sigma {} is negative", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing_mm)
    }

    pub fn skull_mean(&self) -> f64 {
        SKULL_WM_RATIO * self.tissue_means[2]
    }

    /// Mean intensity for a label (0 for background).
    pub fn label_mean(&self, label: u8) -> f64 {
        match label {
            LABEL_CSF => self.tissue_means[0],
            LABEL_GM => self.tissue_means[1],
            LABEL_WM => self.tissue_means[2],
            LABEL_SKULL => self.skull_mean(),
            _ => 0.0,
        }
    }

    /// Continuous (analytic) ellipsoid volume of a tissue shell in mL.
    pub fn analytic_volume_ml(&self, label: u8) -> f64 {
        let ell = |a: [f64; 3]| 4.0 / 3.0 * std::f64::consts::PI * a[0] * a[1] * a[2];
        let voxels = match label {
            LABEL_WM => ell(self.wm_semi_axes),
            LABEL_GM => ell(self.gm_semi_axes) - ell(self.wm_semi_axes),
            LABEL_CSF => ell(self.csf_semi_axes) - ell(self.gm_semi_axes),
            LABEL_SKULL => ell(self.skull_semi_axes) - ell(self.csf_semi_axes),
            _ => 0.0,
        };
        voxels * self.spacing_mm.iter().product::<f64>() / 1000.0
    }
}

/// Exact labels and tissue volumes of a generated phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub geometry: Geometry,
    /// One label per voxel: 0 background, 1 CSF, 2 GM, 3 WM, 4 skull.
    pub labels: Vec<u8>,
    /// Voxel counts indexed by label.
    pub counts: [usize; 5],
    /// Volumes in mL indexed by label.
    pub volumes_ml: [f64; 5],
}

impl GroundTruth {
    pub fn from_labels(geometry: Geometry, labels: Vec<u8>) -> Self {
        let mut counts = [0usize; 5];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        let vv = geometry.voxel_volume_mm3();
        let volumes_ml = counts.map(|c| c as f64 * vv / 1000.0);
        GroundTruth {
            geometry,
            labels,
            counts,
            volumes_ml,
        }
    }

    /// Labels 1–3.
    pub fn brain_mask(&self) -> BrainMask {
        let bits = self
            .labels
            .iter()
            .map(|&l| matches!(l, LABEL_CSF | LABEL_GM | LABEL_WM))
            .collect();
        BrainMask::new(self.geometry.clone(), bits).expect("labels match geometry")
    }

    pub fn label_mask(&self, label: u8) -> BrainMask {
        let bits = self.labels.iter().map(|&l| l == label).collect();
        BrainMask::new(self.geometry.clone(), bits).expect("labels match geometry")
    }

    pub fn sidecar(&self) -> GroundTruthSidecar {
        let c = self.counts;
        let v = self.volumes_ml;
        GroundTruthSidecar {
            voxel_volume_mm3: self.geometry.voxel_volume_mm3(),
            counts: TissueTable {
                background: c[0] as f64,
                csf: c[1] as f64,
                gm: c[2] as f64,
                wm: c[3] as f64,
                skull: c[4] as f64,
            },
            volumes_ml: TissueTable {
                background: v[0],
                csf: v[1],
                gm: v[2],
                wm: v[3],
                skull: v[4],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueTable {
    pub background: f64,
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
    pub skull: f64,
}

/// JSON sidecar written next to a phantom volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSidecar {
    pub voxel_volume_mm3: f64,
    pub counts: TissueTable,
    pub volumes_ml: TissueTable,
}

fn inside(d: [f64; 3], axes: [f64; 3]) -> bool {
    (d[0] / axes[0]).powi(2) + (d[1] / axes[1]).powi(2) + (d[2] / axes[2]).powi(2) <= 1.0
}

/// Label grid of a spec, with the content optionally moved by `motion`
/// (physical mm, rotation about the transform's own center).
pub fn rasterize_labels(spec: &PhantomSpec, motion: Option<&RigidTransform>) -> Result<GroundTruth> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let center = geometry.center_mm();
    let inv = motion.map(|m| m.inverse());
    let s = spec.spacing_mm;
    let mut labels = Vec::with_capacity(geometry.len());
    let [nx, ny, nz] = geometry.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut p = geometry.to_physical([i as f64, j as f64, k as f64]);
                if let Some(inv) = &inv {
                    p = inv.apply_to_point(p);
                }
                let d = [
                    (p[0] - center[0]) / s[0],
                    (p[1] - center[1]) / s[1],
                    (p[2] - center[2]) / s[2],
                ];
                let label = if inside(d, spec.wm_semi_axes) {
                    LABEL_WM
                } else if inside(d, spec.gm_semi_axes) {
                    LABEL_GM
                } else if inside(d, spec.csf_semi_axes) {
                    LABEL_CSF
                } else if inside(d, spec.skull_semi_axes) {
                    LABEL_SKULL
                } else {
                    LABEL_BACKGROUND
                };
                labels.push(label);
            }
        }
    }
    Ok(GroundTruth::from_labels(geometry, labels))
}

/// Intensity image for a label grid: each non-background voxel drawn from a
/// Gaussian around its class mean.
pub fn render(spec: &PhantomSpec, truth: &GroundTruth) -> Result<Volume3D> {
    let mut rng = rng::stream(spec.seed, &[rng::tag("phantom-intensity")]);
    let data = truth
        .labels
        .iter()
        .map(|&l| {
            if l == LABEL_BACKGROUND {
                return 0.0;
            }
            let z: f64 = rng.sample(StandardNormal);
            (spec.label_mean(l) + spec.noise_sigma * z) as f32
        })
        .collect();
    let mut vol = Volume3D::new(truth.geometry.clone(), data)?;
    vol.intensity_units = "a.u.".into();
    Ok(vol)
}

/// Nested-ellipsoid phantom and its ground truth. Pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, GroundTruth)> {
    generate_moved_phantom(spec, None)
}

/// As [`generate_phantom`], with the anatomy displaced by a rigid motion.
pub fn generate_moved_phantom(
    spec: &PhantomSpec,
    motion: Option<&RigidTransform>,
) -> Result<(Volume3D, GroundTruth)> {
    let truth = rasterize_labels(spec, motion)?;
    let vol = render(spec, &truth)?;
    Ok((vol, truth))
}

/// Normalized smooth pattern in `[-1, 1]`: a sum of separable cosine products.
fn cosine_mixture(geometry: &Geometry, length_scale: f64, seed: u64) -> Vec<f64> {
    const TERMS: usize = 3;
    let mut rng = rng::stream(seed, &[rng::tag("bias-field")]);
    let center = geometry.center_mm();
    let mut terms = Vec::with_capacity(TERMS);
    for _ in 0..TERMS {
        let weight: f64 = rng.gen_range(0.5..1.0);
        let freq: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
        let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
        terms.push((weight, freq, phase));
    }

    let [nx, ny, nz] = geometry.dims;
    // Separable factors per axis, evaluated once.
    let axis = |a: usize, n: usize, t: usize| -> Vec<f64> {
        let (_, freq, phase) = terms[t];
        (0..n)
            .map(|i| {
                let x = geometry.origin[a] + geometry.spacing[a] * i as f64 - center[a];
                (std::f64::consts::PI * freq[a] * x / length_scale + phase[a]).cos()
            })
            .collect()
    };
    let factors: Vec<[Vec<f64>; 3]> = (0..TERMS)
        .map(|t| [axis(0, nx, t), axis(1, ny, t), axis(2, nz, t)])
        .collect();

    let mut m = Vec::with_capacity(geometry.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v: f64 = (0..TERMS)
                    .map(|t| terms[t].0 * factors[t][0][i] * factors[t][1][j] * factors[t][2][k])
                    .sum();
                m.push(v);
            }
        }
    }
    let peak = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if peak > 0.0 {
        m.iter_mut().for_each(|v| *v /= peak);
    }
    m
}

fn field_for_scale(pattern: &[f64], scale: f64) -> Vec<f64> {
    let raw: Vec<f64> = pattern.iter().map(|&m| (scale * m).exp()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|f| f / mean).collect()
}

fn max_deviation(field: &[f64]) -> f64 {
    field.iter().fold(0.0f64, |acc, f| acc.max((f - 1.0).abs()))
}

/// Multiply a volume by a smooth positive field with arithmetic mean 1 and
/// `max |f - 1| <= amplitude`. Returns the corrupted volume and the field.
pub fn apply_bias_field(
    vol: &Volume3D,
    amplitude: f64,
    length_scale: f64,
    seed: u64,
) -> Result<(Volume3D, BiasField)> {
    if !(0.0..=0.5).contains(&amplitude) {
        return Err(Error::Parameter(format!("bias amplitude {amplitude} outside [0, 0.5]")));
    }
    let max_spacing = vol.spacing().iter().cloned().fold(0.0, f64::max);
    if !(length_scale >= 4.0 * max_spacing) {
        return Err(Error::Parameter(format!(
            "length scale {length_scale} mm must be at least 4x the voxel spacing ({max_spacing} mm)"
        )));
    }
    let geometry = vol.geometry().clone();
    let field = if amplitude == 0.0 {
        vec![1.0; geometry.len()]
    } else {
        let pattern = cosine_mixture(&geometry, length_scale, seed);
        // Largest exponent scale whose normalized field stays within the bound.
        let (mut lo, mut hi) = (0.0f64, 2.0 * (1.0 + amplitude).ln() + 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if max_deviation(&field_for_scale(&pattern, mid)) <= amplitude {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        field_for_scale(&pattern, lo)
    };
    let data = vol
        .data()
        .iter()
        .zip(field.iter())
        .map(|(&v, &f)| (v as f64 * f) as f32)
        .collect();
    let out = vol.with_data(data)?;
    Ok((out, BiasField::from_values(geometry, field)?))
}

/// Add independent zero-mean Gaussian noise to every voxel.
pub fn add_gaussian_noise(vol: &Volume3D, sigma: f64, seed: u64) -> Result<Volume3D> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("noise sigma {sigma} is negative")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let mut rng = rng::stream(seed, &[rng::tag("additive-noise")]);
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            (v as f64 + sigma * z) as f32
        })
        .collect();
    vol.with_data(data)
}
