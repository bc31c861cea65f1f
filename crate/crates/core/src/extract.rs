//! Threshold / connected-component / morphology brain extraction in two
//! passes.
//!
//! Pass 1 finds the head: a robust threshold on a median-denoised copy,
//! enclosed cavities filled, the largest 26-connected piece kept, closed and
//! filled. Pass 2 splits the head's raw intensities into dark and bright
//! (Otsu), peels the bright outer rind (skull) off the head, keeps what lies
//! within a radius of the tissue's centre of gravity, and tidies the result
//! the same way.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{BrainMask, Geometry, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractParams {
    /// Threshold position between the robust low and high intensities.
    pub frac: f64,
    pub lower_percentile: f64,
    pub upper_percentile: f64,
    /// Closing radius in voxels.
    pub closing_radius: usize,
    /// Pass-2 radius as a multiple of the equivalent-sphere radius.
    pub cog_radius_factor: f64,
    /// Threshold a 3×3×3 median-filtered copy instead of the raw voxels.
    pub median_denoise: bool,
}

impl Default for ExtractParams {
    fn default() -> Self {
        ExtractParams {
            frac: 0.10,
            lower_percentile: 2.0,
            upper_percentile: 98.0,
            closing_radius: 2,
            cog_radius_factor: 1.4,
            median_denoise: true,
        }
    }
}

impl ExtractParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.frac > 0.0 && self.frac < 1.0) {
            return Err(Error::Parameter(format!("frac {} must lie in (0, 1)", self.frac)));
        }
        if !(0.0 <= self.lower_percentile && self.lower_percentile < self.upper_percentile && self.upper_percentile <= 100.0)
        {
            return Err(Error::Parameter("percentiles must satisfy 0 ≤ low < high ≤ 100".into()));
        }
        if self.closing_radius < 1 {
            return Err(Error::Parameter("closing radius must be at least 1".into()));
        }
        if !(self.cog_radius_factor > 0.0) {
            return Err(Error::Parameter("CoG radius factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub mask: BrainMask,
    /// Input with every voxel outside `mask` set to exactly 0.
    pub stripped: Volume3D,
    /// Pass-1 (head) mask.
    pub head: BrainMask,
    pub threshold: f64,
    /// Dark/bright split used to find the rind.
    pub rind_threshold: f64,
    /// Centre of gravity (voxel coordinates) used by pass 2.
    pub cog: [f64; 3],
}

/// Percentiles (nearest rank) of the nonzero voxels; defaults are 2 and 98.
pub fn robust_intensity_range(vol: &Volume3D) -> Result<(f64, f64)> {
    robust_range_at(vol, 2.0, 98.0)
}

fn robust_range_at(vol: &Volume3D, lo: f64, hi: f64) -> Result<(f64, f64)> {
    let mut nz: Vec<f64> = vol.data().iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    if nz.is_empty() {
        return Err(Error::Empty("volume has no nonzero voxels".into()));
    }
    let a = stats::percentile_in_place(&mut nz, lo);
    let b = stats::percentile_in_place(&mut nz, hi);
    Ok((a, b))
}

/// Intensity-weighted centroid of the masked voxels, in voxel coordinates.
/// Falls back to the unweighted centroid when the weights sum to zero.
pub fn center_of_gravity(vol: &Volume3D, mask: &BrainMask) -> Result<[f64; 3]> {
    vol.geometry().check_same(mask.geometry(), "centre of gravity")?;
    if mask.is_empty() {
        return Err(Error::Empty("centre of gravity of an empty mask".into()));
    }
    let g = vol.geometry();
    let mut acc = [0.0f64; 3];
    let mut plain = [0.0f64; 3];
    let mut w_sum = 0.0;
    for i in mask.indices() {
        let c = g.coords(i);
        let w = vol.data()[i] as f64;
        for a in 0..3 {
            acc[a] += w * c[a] as f64;
            plain[a] += c[a] as f64;
        }
        w_sum += w;
    }
    if w_sum > 0.0 {
        Ok(acc.map(|v| v / w_sum))
    } else {
        let n = mask.count() as f64;
        Ok(plain.map(|v| v / n))
    }
}

/// Two-pass extraction; see the module documentation.
pub fn extract_brain(vol: &Volume3D, params: &ExtractParams) -> Result<Extraction> {
    params.validate()?;
    let g = vol.geometry().clone();
    let (lo, hi) = robust_range_at(vol, params.lower_percentile, params.upper_percentile)?;
    let threshold = lo + params.frac * (hi - lo);
    let smooth = if params.median_denoise { median3(vol) } else { vol.clone() };
    let fg = BrainMask::new(g.clone(), smooth.data().iter().map(|&v| v as f64 > threshold).collect())?;
    if fg.is_empty() {
        return Err(Error::Extraction(format!("no voxel above threshold {threshold}")));
    }

    // Pass 1: the head.
    let head = tidy(&largest_component(&fill_holes(&fg)), params.closing_radius);

    // Pass 2: drop the bright rind reachable from the head surface. Raw
    // voxels, because a median window spanning a thin dark gap bridges it.
    let head_values: Vec<f64> = head.indices().map(|i| vol.data()[i] as f64).collect();
    let rind_threshold = otsu_threshold(&head_values);
    let bright = BrainMask::new(g.clone(), vol.data().iter().map(|&v| v as f64 > rind_threshold).collect())?;
    let rind = surface_connected(&head, &bright);
    let inner_bits: Vec<bool> = head.bits().iter().zip(rind.bits()).map(|(&h, &r)| h && !r).collect();
    let mut inner = BrainMask::new(g.clone(), inner_bits)?;
    if inner.count() * 10 < head.count() {
        log::warn!("no separable outer layer found; keeping the head mask");
        inner = head.clone();
    }
    let tissue = BrainMask::new(g.clone(), inner.bits().iter().zip(bright.bits()).map(|(&a, &b)| a && b).collect())?;
    let cog_from = if tissue.is_empty() { &inner } else { &tissue };
    let cog = center_of_gravity(vol, cog_from)?;
    let radius_mm =
        params.cog_radius_factor * (3.0 * inner.count() as f64 * g.voxel_volume_mm3() / (4.0 * std::f64::consts::PI)).cbrt();
    let near: Vec<bool> = (0..g.len())
        .map(|i| {
            if !inner.get(i) {
                return false;
            }
            let c = g.coords(i);
            let d2: f64 = (0..3).map(|a| ((c[a] as f64 - cog[a]) * g.spacing[a]).powi(2)).sum();
            d2 <= radius_mm * radius_mm
        })
        .collect();
    let near = BrainMask::new(g.clone(), near)?;
    let mask = tidy(&largest_component(&near), params.closing_radius);
    if mask.is_empty() {
        return Err(Error::Extraction("brain mask vanished during refinement".into()));
    }
    let stripped = vol.with_data(
        vol.data()
            .iter()
            .zip(mask.bits())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect(),
    )?;
    Ok(Extraction {
        mask,
        stripped,
        head,
        threshold,
        rind_threshold,
        cog,
    })
}

/// Otsu's two-class threshold over a 256-bin histogram.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return lo;
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let centre = |b: usize| lo + (b as f64 + 0.5) * width;
    let total = values.len() as f64;
    let sum_all: f64 = (0..BINS).map(|b| hist[b] as f64 * centre(b)).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, lo);
    for b in 0..BINS - 1 {
        w0 += hist[b] as f64;
        s0 += hist[b] as f64 * centre(b);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = s0 / w0 - (sum_all - s0) / w1;
        let between = w0 * w1 * d * d;
        if between > best.0 {
            best = (between, lo + (b + 1) as f64 * width);
        }
    }
    best.1
}

fn tidy(mask: &BrainMask, radius: usize) -> BrainMask {
    fill_holes(&largest_component(&close(mask, radius)))
}

/// 3×3×3 median, using only in-grid neighbours at the borders.
pub fn median3(vol: &Volume3D) -> Volume3D {
    let g = vol.geometry();
    let [nx, ny, nz] = g.dims;
    let src = vol.data();
    let data: Vec<f32> = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = g.coords(idx);
            let mut buf = [0.0f32; 27];
            let mut n = 0;
            for z in k.saturating_sub(1)..=(k + 1).min(nz - 1) {
                for y in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                    for x in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                        buf[n] = src[g.index(x, y, z)];
                        n += 1;
                    }
                }
            }
            let s = &mut buf[..n];
            let (_, m, _) = s.select_nth_unstable_by(n / 2, |a, b| a.total_cmp(b));
            *m
        })
        .collect();
    vol.with_data(data).expect("same grid")
}

fn neighbors26(g: &Geometry, idx: usize, mut f: impl FnMut(usize)) {
    let [i, j, k] = g.coords(idx);
    let [nx, ny, nz] = g.dims;
    for z in k.saturating_sub(1)..=(k + 1).min(nz - 1) {
        for y in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
            for x in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                let n = g.index(x, y, z);
                if n != idx {
                    f(n);
                }
            }
        }
    }
}

/// Largest 26-connected component. Equal sizes are resolved in favour of
/// the component containing the lowest linear index.
pub fn largest_component(mask: &BrainMask) -> BrainMask {
    let g = mask.geometry();
    let mut label = vec![0u32; g.len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in mask.indices() {
        if label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            neighbors26(g, v, |n| {
                if mask.get(n) && label[n] == 0 {
                    label[n] = next;
                    queue.push_back(n);
                }
            });
        }
        // Scanning in index order, so earlier components have lower minima.
        if size > best.0 {
            best = (size, next);
        }
    }
    let bits = label.iter().map(|&l| l != 0 && l == best.1).collect();
    BrainMask::new(g.clone(), bits).expect("same grid")
}

/// Set every background voxel not 6-connected to the grid border.
pub fn fill_holes(mask: &BrainMask) -> BrainMask {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims;
    let mut outside = vec![false; g.len()];
    let mut queue = VecDeque::new();
    for idx in 0..g.len() {
        let [i, j, k] = g.coords(idx);
        let border = i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
        if border && !mask.get(idx) {
            outside[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(v) = queue.pop_front() {
        g.for_each_face_neighbor(v, |n| {
            if !mask.get(n) && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        });
    }
    BrainMask::new(g.clone(), outside.iter().map(|&o| !o).collect()).expect("same grid")
}

fn ball(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y + z * z <= r * r {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Voxels whose ball neighbourhood contains a voxel equal to `want`; points
/// beyond the grid read as `outside_value`.
fn ball_hits(mask: &BrainMask, radius: usize, want: bool, outside_value: bool) -> Vec<bool> {
    let g = mask.geometry();
    let offsets = ball(radius);
    let dims = g.dims.map(|d| d as isize);
    (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let c = g.coords(idx).map(|v| v as isize);
            offsets.iter().any(|o| {
                let p = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a]) {
                    outside_value == want
                } else {
                    mask.get(g.index(p[0] as usize, p[1] as usize, p[2] as usize)) == want
                }
            })
        })
        .collect()
}

pub fn dilate(mask: &BrainMask, radius: usize) -> BrainMask {
    BrainMask::new(mask.geometry().clone(), ball_hits(mask, radius, true, false)).expect("same grid")
}

/// Erosion that treats the region beyond the grid as foreground, so a
/// closing never eats into a mask touching the border.
pub fn erode(mask: &BrainMask, radius: usize) -> BrainMask {
    let hits = ball_hits(mask, radius, false, true);
    BrainMask::new(mask.geometry().clone(), hits.iter().map(|&h| !h).collect()).expect("same grid")
}

pub fn close(mask: &BrainMask, radius: usize) -> BrainMask {
    erode(&dilate(mask, radius), radius)
}

/// Voxels of `fg ∩ region` 6-connected (within that set) to a voxel on the
/// surface of `region`.
fn surface_connected(region: &BrainMask, fg: &BrainMask) -> BrainMask {
    let g = region.geometry();
    let inside = |i: usize| region.get(i) && fg.get(i);
    let mut hit = vec![false; g.len()];
    let mut queue = VecDeque::new();
    for idx in region.indices() {
        let mut surface = false;
        let mut faces = 0;
        g.for_each_face_neighbor(idx, |n| {
            faces += 1;
            surface |= !region.get(n);
        });
        if (surface || faces < 6) && inside(idx) {
            hit[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(v) = queue.pop_front() {
        g.for_each_face_neighbor(v, |n| {
            if inside(n) && !hit[n] {
                hit[n] = true;
                queue.push_back(n);
            }
        });
    }
    BrainMask::new(g.clone(), hit).expect("same grid")
}
