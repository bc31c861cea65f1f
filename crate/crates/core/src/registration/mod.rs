//! Rigid (6-DOF) intra-subject registration.
//!
//! The cost is the mean squared intensity difference over the fixed image's
//! nonzero voxels, after a light Gaussian blur of both images at every
//! pyramid level. It is minimized coarse-to-fine over a 2×2×2 mean-pooling
//! pyramid with a Nelder–Mead simplex restarted at every level.
//!
//! The blur matters for images with hard, voxel-aligned edges: without it
//! the staircase pattern of a rotated edge makes the cost nearly flat (and
//! biased) over a degree or more of rotation.

mod simplex;
pub mod transform;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BrainMask, Geometry, Volume3D};
pub use simplex::{nelder_mead, NelderMeadResult};
pub use transform::{RigidTransform, TransformRecord};
use transform::{apply_with, Mat3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegParams {
    /// Pyramid levels; level count 1 registers at full resolution only.
    pub levels: usize,
    pub max_evals_per_level: usize,
    pub tol_translation_mm: f64,
    pub tol_rotation_rad: f64,
    pub simplex_translation_mm: f64,
    pub simplex_rotation_rad: f64,
    /// Gaussian blur applied to both images at each level, in that level's
    /// voxels; 0 disables it.
    pub smoothing_sigma_vox: f64,
}

impl Default for RegParams {
    fn default() -> Self {
        RegParams {
            levels: 3,
            max_evals_per_level: 2000,
            tol_translation_mm: 0.01,
            tol_rotation_rad: 0.0005,
            simplex_translation_mm: 5.0,
            simplex_rotation_rad: 0.05,
            smoothing_sigma_vox: 1.0,
        }
    }
}

/// Voxel-to-voxel affine map `reference index -> moving index` for the
/// pull-back `moving(T⁻¹(p))`.
struct PullBack {
    m: Mat3,
    d: [f64; 3],
}

impl PullBack {
    fn new(moving: &Geometry, t: &RigidTransform, reference: &Geometry) -> Self {
        let inv = t.inverse();
        let r = inv.rotation();
        // q_vox = S_m⁻¹ (R (o_r + S_r i - c) + c + t - o_m)
        let mut m = [[0.0; 3]; 3];
        for row in 0..3 {
            for col in 0..3 {
                m[row][col] = r[row][col] * reference.spacing[col] / moving.spacing[row];
            }
        }
        let o = apply_with(&r, inv.center_mm, inv.translation_mm, reference.origin);
        let d = [0, 1, 2].map(|a| (o[a] - moving.origin[a]) / moving.spacing[a]);
        PullBack { m, d }
    }

    #[inline]
    fn map(&self, i: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * i[0] + m[0][1] * i[1] + m[0][2] * i[2] + self.d[0],
            m[1][0] * i[0] + m[1][1] * i[1] + m[1][2] * i[2] + self.d[1],
            m[2][0] * i[0] + m[2][1] * i[1] + m[2][2] * i[2] + self.d[2],
        ]
    }
}

const EDGE_EPS: f64 = 1e-9;

/// Trilinear sample at a fractional voxel coordinate; 0 outside the grid.
#[inline]
pub fn sample_trilinear(vol: &Volume3D, q: [f64; 3]) -> f64 {
    let g = vol.geometry();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let n = g.dims[a];
        let x = q[a];
        if !(x >= -EDGE_EPS && x <= (n - 1) as f64 + EDGE_EPS) {
            return 0.0;
        }
        let x = x.clamp(0.0, (n - 1) as f64);
        let f = x.floor();
        let mut b = f as usize;
        let mut t = x - f;
        if b + 1 >= n {
            // On the last sample (or a singleton axis): no upper neighbour.
            b = n - 1;
            t = 0.0;
        }
        base[a] = b;
        frac[a] = t;
    }
    let data = vol.data();
    let [nx, ny, _] = g.dims;
    let sy = nx;
    let sz = nx * ny;
    let i0 = base[0] + sy * base[1] + sz * base[2];
    let step = [
        if frac[0] > 0.0 { 1 } else { 0 },
        if frac[1] > 0.0 { sy } else { 0 },
        if frac[2] > 0.0 { sz } else { 0 },
    ];
    let v = |o: usize| data[i0 + o] as f64;
    let [tx, ty, tz] = frac;
    let c00 = v(0) * (1.0 - tx) + v(step[0]) * tx;
    let c10 = v(step[1]) * (1.0 - tx) + v(step[1] + step[0]) * tx;
    let c01 = v(step[2]) * (1.0 - tx) + v(step[2] + step[0]) * tx;
    let c11 = v(step[2] + step[1]) * (1.0 - tx) + v(step[2] + step[1] + step[0]) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tz) + c1 * tz
}

/// Resample `moving` onto `reference` geometry: each reference voxel center
/// `p` takes the trilinear value of `moving` at `T⁻¹(p)`.
pub fn resample_trilinear(moving: &Volume3D, t: &RigidTransform, reference: &Geometry) -> Result<Volume3D> {
    let pb = PullBack::new(moving.geometry(), t, reference);
    let [nx, ny, nz] = reference.dims;
    let mut data = Vec::with_capacity(reference.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let q = pb.map([i as f64, j as f64, k as f64]);
                data.push(sample_trilinear(moving, q) as f32);
            }
        }
    }
    let mut out = Volume3D::new(reference.clone(), data)?;
    out.intensity_units = moving.intensity_units.clone();
    Ok(out)
}

/// Source voxel index nearest to each reference voxel under the pull-back,
/// `None` outside the source grid.
fn nearest_indices(source: &Geometry, t: &RigidTransform, reference: &Geometry) -> Vec<Option<usize>> {
    let pb = PullBack::new(source, t, reference);
    let [nx, ny, nz] = reference.dims;
    let mut out = Vec::with_capacity(reference.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let q = pb.map([i as f64, j as f64, k as f64]);
                let mut c = [0usize; 3];
                let inside = (0..3).all(|a| {
                    let r = q[a].round();
                    c[a] = r.max(0.0) as usize;
                    r >= 0.0 && r <= (source.dims[a] - 1) as f64
                });
                out.push(inside.then(|| source.index(c[0], c[1], c[2])));
            }
        }
    }
    out
}

/// Nearest-neighbour pull-back of a mask (for label-like data).
pub fn resample_mask_nearest(mask: &BrainMask, t: &RigidTransform, reference: &Geometry) -> Result<BrainMask> {
    let bits = nearest_indices(mask.geometry(), t, reference)
        .into_iter()
        .map(|src| src.is_some_and(|i| mask.get(i)))
        .collect();
    BrainMask::new(reference.clone(), bits)
}

/// Nearest-neighbour pull-back of a volume; 0 outside the source grid.
/// Every output value is one of the input values, so voxel-wise quantities
/// such as probabilities are carried over unchanged.
pub fn resample_nearest(moving: &Volume3D, t: &RigidTransform, reference: &Geometry) -> Result<Volume3D> {
    let data = nearest_indices(moving.geometry(), t, reference)
        .into_iter()
        .map(|src| src.map_or(0.0, |i| moving.data()[i]))
        .collect();
    let mut out = Volume3D::new(reference.clone(), data)?;
    out.intensity_units = moving.intensity_units.clone();
    Ok(out)
}

/// Fixed-image voxels that contribute to the cost, with their coordinates.
struct CostGrid {
    geometry: Geometry,
    coords: Vec<[f64; 3]>,
    values: Vec<f64>,
}

impl CostGrid {
    fn new(fixed: &Volume3D) -> Result<Self> {
        let g = fixed.geometry();
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for (idx, &v) in fixed.data().iter().enumerate() {
            if v > 0.0 {
                coords.push(g.coords(idx).map(|c| c as f64));
                values.push(v as f64);
            }
        }
        if values.is_empty() {
            return Err(Error::Input("fixed image has no nonzero voxels".into()));
        }
        Ok(CostGrid {
            geometry: g.clone(),
            coords,
            values,
        })
    }

    fn cost(&self, moving: &Volume3D, t: &RigidTransform) -> f64 {
        let pb = PullBack::new(moving.geometry(), t, &self.geometry);
        let mut sum = 0.0;
        for (c, &f) in self.coords.iter().zip(&self.values) {
            let d = f - sample_trilinear(moving, pb.map(*c));
            sum += d * d;
        }
        sum / self.values.len() as f64
    }
}

/// Mean squared difference over voxels where `fixed > 0`, with `moving`
/// pulled back through `t`.
pub fn mse_cost(fixed: &Volume3D, moving: &Volume3D, t: &RigidTransform) -> Result<f64> {
    Ok(CostGrid::new(fixed)?.cost(moving, t))
}

/// Halve resolution by 2×2×2 mean pooling. Axes of extent 1 are kept.
pub fn downsample2(vol: &Volume3D) -> Result<Volume3D> {
    let g = vol.geometry();
    let mut dims = [0usize; 3];
    let mut factor = [1usize; 3];
    for a in 0..3 {
        if g.dims[a] >= 2 {
            dims[a] = g.dims[a] / 2;
            factor[a] = 2;
        } else {
            dims[a] = 1;
        }
    }
    let mut out_g = g.clone();
    out_g.dims = dims;
    for a in 0..3 {
        out_g.spacing[a] = g.spacing[a] * factor[a] as f64;
        out_g.origin[a] = g.origin[a] + 0.5 * (factor[a] - 1) as f64 * g.spacing[a];
    }
    let norm = (factor[0] * factor[1] * factor[2]) as f64;
    let data = vol.data();
    let mut out = Vec::with_capacity(out_g.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let mut s = 0.0f64;
                for dz in 0..factor[2] {
                    for dy in 0..factor[1] {
                        for dx in 0..factor[0] {
                            s += data[g.index(i * factor[0] + dx, j * factor[1] + dy, k * factor[2] + dz)] as f64;
                        }
                    }
                }
                out.push((s / norm) as f32);
            }
        }
    }
    let mut v = Volume3D::new(out_g, out)?;
    v.intensity_units = vol.intensity_units.clone();
    Ok(v)
}

/// Separable Gaussian blur with standard deviation `sigma_vox` voxels. The
/// kernel is truncated at 3σ and renormalized where it leaves the grid.
pub fn gaussian_smooth(vol: &Volume3D, sigma_vox: f64) -> Volume3D {
    if !(sigma_vox > 0.0) {
        return vol.clone();
    }
    let r = (3.0 * sigma_vox).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let g = vol.geometry();
    let mut data: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    for axis in 0..3 {
        let n = g.dims[axis] as isize;
        if n == 1 {
            continue;
        }
        let src = &data;
        data = (0..g.len())
            .into_par_iter()
            .map(|idx| {
                let pos = g.coords(idx)[axis] as isize;
                let (mut acc, mut w) = (0.0, 0.0);
                for (t, &k) in (-r..=r).zip(&kernel) {
                    let p = pos + t;
                    if p >= 0 && p < n {
                        let j = (idx as isize + t * strides[axis] as isize) as usize;
                        acc += k * src[j];
                        w += k;
                    }
                }
                acc / w
            })
            .collect();
    }
    let mut out = vol.with_data(data.iter().map(|&v| v as f32).collect()).expect("same grid");
    out.intensity_units = vol.intensity_units.clone();
    out
}

/// The objective minimized by [`register_rigid`] at full resolution: MSE of
/// the blurred images.
pub fn registration_cost(fixed: &Volume3D, moving: &Volume3D, t: &RigidTransform, params: &RegParams) -> Result<f64> {
    let f = gaussian_smooth(fixed, params.smoothing_sigma_vox);
    let m = gaussian_smooth(moving, params.smoothing_sigma_vox);
    mse_cost(&f, &m, t)
}

/// Intensity-weighted centroid of the positive voxels, in mm.
fn positive_centroid_mm(vol: &Volume3D) -> Option<[f64; 3]> {
    let g = vol.geometry();
    let mut acc = [0.0f64; 3];
    let mut w = 0.0f64;
    for (idx, &v) in vol.data().iter().enumerate() {
        if v > 0.0 {
            let c = g.coords(idx);
            for a in 0..3 {
                acc[a] += v as f64 * c[a] as f64;
            }
            w += v as f64;
        }
    }
    (w > 0.0).then(|| g.to_physical(acc.map(|a| a / w)))
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// [`registration_cost`] at `transform`.
    pub final_cost: f64,
    pub evaluations: usize,
}

/// Find `T` such that `resample_trilinear(moving, T, fixed)` best matches
/// `fixed`. Rotation is about the fixed grid's physical center.
pub fn register_rigid(fixed: &Volume3D, moving: &Volume3D, params: &RegParams) -> Result<RegistrationResult> {
    if params.levels == 0 {
        return Err(Error::Parameter("registration needs at least one pyramid level".into()));
    }
    let center = fixed.geometry().center_mm();
    let (cf, cm) = match (positive_centroid_mm(fixed), positive_centroid_mm(moving)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Input("cannot register an all-zero volume".into())),
    };
    let seed = RigidTransform::new([0.0; 3], [cf[0] - cm[0], cf[1] - cm[1], cf[2] - cm[2]], center);

    let mut fixed_pyr = vec![fixed.clone()];
    let mut moving_pyr = vec![moving.clone()];
    for _ in 1..params.levels {
        let f = downsample2(fixed_pyr.last().unwrap())?;
        let m = downsample2(moving_pyr.last().unwrap())?;
        fixed_pyr.push(f);
        moving_pyr.push(m);
    }
    let sigma = params.smoothing_sigma_vox;
    let fixed_pyr: Vec<Volume3D> = fixed_pyr.iter().map(|v| gaussian_smooth(v, sigma)).collect();
    let moving_pyr: Vec<Volume3D> = moving_pyr.iter().map(|v| gaussian_smooth(v, sigma)).collect();

    let tol = [
        params.tol_translation_mm,
        params.tol_translation_mm,
        params.tol_translation_mm,
        params.tol_rotation_rad,
        params.tol_rotation_rad,
        params.tol_rotation_rad,
    ];
    let mut current = seed;
    let mut evaluations = 0;
    for level in (0..params.levels).rev() {
        let grid = CostGrid::new(&fixed_pyr[level])?;
        let mov = &moving_pyr[level];
        let shrink = 0.5f64.powi((params.levels - 1 - level) as i32);
        let step = [
            params.simplex_translation_mm * shrink,
            params.simplex_translation_mm * shrink,
            params.simplex_translation_mm * shrink,
            params.simplex_rotation_rad * shrink,
            params.simplex_rotation_rad * shrink,
            params.simplex_rotation_rad * shrink,
        ];
        let f = |p: &[f64]| grid.cost(mov, &RigidTransform::from_params(p, center));
        let start = current.params();
        let first = nelder_mead(&f, &start, &step, &tol, params.max_evals_per_level);
        evaluations += first.evaluations;
        let mut best = first;
        // One restart from the optimum guards against premature collapse.
        let remaining = params.max_evals_per_level.saturating_sub(best.evaluations);
        if remaining > 0 {
            let half: Vec<f64> = step.iter().map(|s| 0.5 * s).collect();
            let again = nelder_mead(&f, &best.x, &half, &tol, remaining);
            evaluations += again.evaluations;
            if again.value < best.value {
                best = again;
            }
        }
        log::debug!(
            "registration level {level}: cost {:.4} after {} evaluations",
            best.value,
            evaluations
        );
        current = RigidTransform::from_params(&best.x, center);
    }

    let grid = CostGrid::new(&fixed_pyr[0])?;
    let mut final_cost = grid.cost(&moving_pyr[0], &current);
    for candidate in [RigidTransform::identity(center), seed] {
        let c = grid.cost(&moving_pyr[0], &candidate);
        if c < final_cost {
            final_cost = c;
            current = candidate;
        }
    }
    Ok(RegistrationResult {
        transform: current,
        final_cost,
        evaluations,
    })
}

/// Largest displacement (mm) between two transforms over a set of voxels.
pub fn max_displacement_mm(a: &RigidTransform, b: &RigidTransform, geometry: &Geometry, voxels: impl Iterator<Item = usize>) -> f64 {
    let mut worst = 0.0f64;
    for idx in voxels {
        let p = geometry.to_physical(geometry.coords(idx).map(|c| c as f64));
        let pa = a.apply_to_point(p);
        let pb = b.apply_to_point(p);
        let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
        worst = worst.max(d);
    }
    worst
}
