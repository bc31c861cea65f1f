//! Longitudinal phantom cohorts: per patient a fixed anatomy whose grey
//! matter shell thins and whose CSF shell widens visit by visit, each visit
//! scanned under fresh motion, bias field and noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, PatientEntry, MIN_VISITS};
use crate::bias::BiasField;
use crate::error::{Error, Result};
use crate::nifti::write_nifti;
use crate::phantom::{apply_bias_field, generate_moved_phantom, GroundTruth, GroundTruthSidecar, PhantomSpec};
use crate::registration::{RigidTransform, TransformRecord};
use crate::rng;
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortPhantomSpec {
    /// Visit-1 anatomy before the per-patient head scaling.
    pub base: PhantomSpec,
    pub patients: usize,
    pub visits: usize,
    /// Fractional grey-matter loss per visit (compounding).
    pub gm_atrophy_per_visit: f64,
    /// Fractional CSF gain per visit (compounding).
    pub csf_growth_per_visit: f64,
    /// Per-patient uniform scale of every semi-axis, drawn from this range.
    pub head_scale_range: [f64; 2],
    pub bias_amplitude: f64,
    pub bias_length_scale_mm: f64,
    /// Visits after the first move by up to this much along each axis.
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
    pub seed: u64,
}

impl Default for CohortPhantomSpec {
    fn default() -> Self {
        CohortPhantomSpec {
            base: PhantomSpec::default(),
            patients: 15,
            visits: 4,
            gm_atrophy_per_visit: 0.03,
            csf_growth_per_visit: 0.03,
            head_scale_range: [0.95, 1.0],
            bias_amplitude: 0.2,
            bias_length_scale_mm: 64.0,
            max_translation_mm: 3.0,
            max_rotation_deg: 3.0,
            seed: 1,
        }
    }
}

/// One synthetic scan with everything needed to judge the pipeline on it.
#[derive(Debug, Clone)]
pub struct VisitPhantom {
    pub volume: Volume3D,
    pub truth: GroundTruth,
    /// Anatomy displacement relative to visit 1.
    pub motion: RigidTransform,
    pub field: BiasField,
    pub spec: PhantomSpec,
}

/// JSON sidecar of a cohort visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSidecar {
    pub patient_id: String,
    pub visit: usize,
    pub truth: GroundTruthSidecar,
    pub motion: TransformRecord,
    pub bias_amplitude: f64,
    pub spec: PhantomSpec,
}

fn ellipsoid(axes: [f64; 3]) -> f64 {
    axes[0] * axes[1] * axes[2]
}

fn scaled(axes: [f64; 3], s: f64) -> [f64; 3] {
    axes.map(|a| a * s)
}

impl CohortPhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.patients == 0 {
            return Err(Error::Parameter("cohort needs at least one patient".into()));
        }
        if self.visits < MIN_VISITS {
            return Err(Error::Parameter(format!(
                "{} visits requested; at least three visits are required",
                self.visits
            )));
        }
        if !(0.0..1.0).contains(&self.gm_atrophy_per_visit) || !(self.csf_growth_per_visit >= 0.0) {
            return Err(Error::Parameter("atrophy must lie in [0, 1) and CSF growth be non-negative".into()));
        }
        let [lo, hi] = self.head_scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Parameter(format!("head scale range [{lo}, {hi}] is invalid")));
        }
        if !(self.max_translation_mm >= 0.0 && self.max_rotation_deg >= 0.0) {
            return Err(Error::Parameter("motion bounds must be non-negative".into()));
        }
        for p in 0..self.patients {
            for v in 1..=self.visits {
                self.anatomy(p, v)?;
            }
        }
        Ok(())
    }

    pub fn patient_id(&self, patient: usize) -> String {
        let width = self.patients.to_string().len().max(2);
        format!("P{:0width$}", patient + 1)
    }

    fn head_scale(&self, patient: usize) -> f64 {
        let [lo, hi] = self.head_scale_range;
        if lo == hi {
            return lo;
        }
        let mut r = rng::stream(self.seed, &[rng::tag("head-scale"), patient as u64]);
        r.gen_range(lo..hi)
    }

    /// Anatomy of a (0-based) patient at a (1-based) visit. The white
    /// matter core and the skull stay fixed; the grey-matter outer surface
    /// moves in to hit the atrophy schedule and the CSF outer surface moves
    /// to hit the CSF schedule.
    pub fn anatomy(&self, patient: usize, visit: usize) -> Result<PhantomSpec> {
        let s = self.head_scale(patient);
        let b = &self.base;
        let wm = scaled(b.wm_semi_axes, s);
        let gm0 = scaled(b.gm_semi_axes, s);
        let csf0 = scaled(b.csf_semi_axes, s);
        let steps = (visit - 1) as i32;
        let gm_vol = (ellipsoid(gm0) - ellipsoid(wm)) * (1.0 - self.gm_atrophy_per_visit).powi(steps);
        let csf_vol = (ellipsoid(csf0) - ellipsoid(gm0)) * (1.0 + self.csf_growth_per_visit).powi(steps);
        let gm = scaled(gm0, ((ellipsoid(wm) + gm_vol) / ellipsoid(gm0)).cbrt());
        let csf = scaled(csf0, ((ellipsoid(gm) + csf_vol) / ellipsoid(csf0)).cbrt());
        let spec = PhantomSpec {
            wm_semi_axes: wm,
            gm_semi_axes: gm,
            csf_semi_axes: csf,
            skull_semi_axes: scaled(b.skull_semi_axes, s),
            seed: rng::derive_seed(self.seed, &[rng::tag("visit-noise"), patient as u64, visit as u64]),
            ..b.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    fn motion(&self, patient: usize, visit: usize, center: [f64; 3]) -> RigidTransform {
        if visit == 1 {
            return RigidTransform::identity(center);
        }
        let mut r = rng::stream(self.seed, &[rng::tag("visit-motion"), patient as u64, visit as u64]);
        let rot = self.max_rotation_deg.to_radians();
        let tr = self.max_translation_mm;
        let mut draw = |m: f64| if m > 0.0 { r.gen_range(-m..=m) } else { 0.0 };
        let euler = [draw(rot), draw(rot), draw(rot)];
        let translation = [draw(tr), draw(tr), draw(tr)];
        RigidTransform::new(euler, translation, center)
    }

    /// Generate one scan. Pure function of the spec and indices.
    pub fn visit(&self, patient: usize, visit: usize) -> Result<VisitPhantom> {
        if patient >= self.patients || visit == 0 || visit > self.visits {
            return Err(Error::Parameter(format!("no visit {visit} of patient {patient} in this cohort")));
        }
        let spec = self.anatomy(patient, visit)?;
        let motion = self.motion(patient, visit, spec.geometry()?.center_mm());
        let (clean, truth) = generate_moved_phantom(&spec, Some(&motion))?;
        let bias_seed = rng::derive_seed(self.seed, &[rng::tag("visit-bias"), patient as u64, visit as u64]);
        let (volume, field) = apply_bias_field(&clean, self.bias_amplitude, self.bias_length_scale_mm, bias_seed)?;
        Ok(VisitPhantom {
            volume,
            truth,
            motion,
            field,
            spec,
        })
    }

    /// Write every visit as `<out>/<id>/visit<k>.nii.gz` with a
    /// `visit<k>.truth.json` sidecar, plus `<out>/manifest.json` listing
    /// the visits by relative path. The returned manifest holds the paths
    /// joined onto `out_dir`.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<Manifest> {
        self.validate()?;
        let out = out_dir.as_ref();
        let mut patients = Vec::with_capacity(self.patients);
        for p in 0..self.patients {
            let id = self.patient_id(p);
            let dir = out.join(&id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut visits = Vec::with_capacity(self.visits);
            for v in 1..=self.visits {
                let vp = self.visit(p, v)?;
                let name = format!("visit{v}.nii.gz");
                write_nifti(&vp.volume, dir.join(&name))?;
                let sidecar = VisitSidecar {
                    patient_id: id.clone(),
                    visit: v,
                    truth: vp.truth.sidecar(),
                    motion: TransformRecord::new(&vp.motion, 0.0),
                    bias_amplitude: self.bias_amplitude,
                    spec: vp.spec,
                };
                let json = serde_json::to_string_pretty(&sidecar)?;
                crate::write_atomic(dir.join(format!("visit{v}.truth.json")), json.as_bytes())?;
                visits.push(PathBuf::from(&id).join(name));
            }
            patients.push(PatientEntry { id, visits });
        }
        let mut manifest = Manifest { patients };
        crate::write_atomic(out.join("manifest.json"), manifest.to_json().as_bytes())?;
        for p in &mut manifest.patients {
            for v in &mut p.visits {
                *v = out.join(&*v);
            }
        }
        Ok(manifest)
    }
}

/// Write a single phantom as `<out>/phantom.nii.gz` plus
/// `<out>/phantom.truth.json`.
pub fn write_phantom(spec: &PhantomSpec, out_dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (vol, truth) = crate::phantom::generate_phantom(spec)?;
    write_nifti(&vol, out.join("phantom.nii.gz"))?;
    let json = serde_json::to_string_pretty(&truth.sidecar())?;
    crate::write_atomic(out.join("phantom.truth.json"), json.as_bytes())?;
    Ok(truth)
}

/// Either phantom document accepted by the `phantom` command: a complete
/// single-phantom spec, or a (possibly partial) cohort spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhantomJob {
    Single(PhantomSpec),
    Cohort(CohortPhantomSpec),
}

impl PhantomJob {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|_| {
            Error::Parameter("phantom spec is neither a complete phantom spec nor a cohort spec".into())
        })
    }
}
