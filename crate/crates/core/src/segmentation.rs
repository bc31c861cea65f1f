//! Three-class (CSF/GM/WM) tissue segmentation with a Gaussian hidden Markov
//! random field fitted by EM.
//!
//! The spatial prior is a mean-field Potts term over the 6-neighbourhood:
//! `prior_ℓ(i) ∝ exp(β Σ_{j∈N6(i)} q_j(ℓ))`, where `q_j` is the current
//! posterior of neighbour `j`. With `β = 0` the model is a plain Gaussian
//! mixture and EM is exact.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{BrainMask, Geometry, Volume3D};
use crate::volumetry::Tissue;

/// Voxels per block in reductions. Fixed so sums do not depend on the
/// number of threads.
const REDUCE_BLOCK: usize = 4096;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianClassParams {
    pub mean: [f64; 3],
    pub sigma: [f64; 3],
    pub weight: [f64; 3],
}

impl GaussianClassParams {
    fn log_density(&self, y: f64) -> [f64; 3] {
        [0, 1, 2].map(|l| {
            let d = (y - self.mean[l]) / self.sigma[l];
            -0.5 * d * d - self.sigma[l].ln() - LN_SQRT_2PI
        })
    }

    fn ln_weight(&self) -> [f64; 3] {
        self.weight.map(f64::ln)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    /// 1-D k-means seeded at the 25th/50th/75th percentiles.
    #[default]
    KMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub beta_mrf: f64,
    pub iterations: usize,
    /// Mean-field sweeps per E-step.
    pub sweeps: usize,
    /// Absolute σ floor; `None` means 1e-3 × the masked intensity range.
    pub sigma_floor: Option<f64>,
    pub init: InitMethod,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            beta_mrf: 0.4,
            iterations: 20,
            sweeps: 2,
            sigma_floor: None,
            init: InitMethod::KMeans,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_mrf >= 0.0) || !self.beta_mrf.is_finite() {
            return Err(Error::Parameter(format!("beta_mrf {} must be non-negative", self.beta_mrf)));
        }
        if self.iterations == 0 || self.sweeps == 0 {
            return Err(Error::Parameter("EM iterations and sweeps must be at least 1".into()));
        }
        if let Some(f) = self.sigma_floor {
            if !(f > 0.0) {
                return Err(Error::Parameter(format!("sigma floor {f} must be positive")));
            }
        }
        Ok(())
    }
}

/// CSF, GM and WM probability maps on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueProbabilityMaps {
    geometry: Geometry,
    maps: [Vec<f64>; 3],
}

impl TissueProbabilityMaps {
    pub fn new(geometry: Geometry, maps: [Vec<f64>; 3]) -> Result<Self> {
        if maps.iter().any(|m| m.len() != geometry.len()) {
            return Err(Error::Shape("probability map size does not match its grid".into()));
        }
        if maps.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidVolume("probabilities must lie in [0, 1]".into()));
        }
        Ok(TissueProbabilityMaps { geometry, maps })
    }

    /// 1/3 per class inside `mask`, 0 outside.
    pub fn uniform(mask: &BrainMask) -> Self {
        let m: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 / 3.0 } else { 0.0 }).collect();
        TissueProbabilityMaps {
            geometry: mask.geometry().clone(),
            maps: [m.clone(), m.clone(), m],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn map(&self, t: Tissue) -> &[f64] {
        &self.maps[t.index()]
    }

    pub fn maps(&self) -> &[Vec<f64>; 3] {
        &self.maps
    }

    pub fn at(&self, idx: usize) -> [f64; 3] {
        [self.maps[0][idx], self.maps[1][idx], self.maps[2][idx]]
    }

    pub fn to_volume(&self, t: Tissue) -> Volume3D {
        let mut v = Volume3D::new(self.geometry.clone(), self.map(t).iter().map(|&p| p as f32).collect())
            .expect("map matches its geometry");
        v.intensity_units = "probability".into();
        v
    }

    /// Hard labels using the phantom convention: 0 where all maps are zero,
    /// otherwise 1 + argmax (CSF 1, GM 2, WM 3). Ties go to the lower class.
    pub fn argmax_labels(&self) -> Vec<u8> {
        (0..self.geometry.len())
            .map(|i| {
                let p = self.at(i);
                if p == [0.0; 3] {
                    return 0;
                }
                let mut best = 0;
                for l in 1..3 {
                    if p[l] > p[best] {
                        best = l;
                    }
                }
                best as u8 + 1
            })
            .collect()
    }
}

/// Normal density. `sigma` below `sigma_floor` (or not positive) is a
/// parameter error.
///
/// ```
/// use neurotrend::segmentation::gaussian_pdf;
/// let peak = gaussian_pdf(3.0, 3.0, 1.0, 1e-3).unwrap();
/// assert!((peak - 0.398_942_280_4).abs() < 1e-9);
/// ```
pub fn gaussian_pdf(y: f64, mean: f64, sigma: f64, sigma_floor: f64) -> Result<f64> {
    if !(sigma >= sigma_floor && sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma {sigma} is below the floor {sigma_floor}")));
    }
    let d = (y - mean) / sigma;
    Ok((-0.5 * d * d).exp() / (sigma * (2.0 * PI).sqrt()))
}

fn intensity_range(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Default σ floor for a set of intensities.
pub fn default_sigma_floor(values: &[f64]) -> f64 {
    let r = intensity_range(values);
    if r > 0.0 {
        1e-3 * r
    } else {
        1e-3
    }
}

/// k-means initial parameters, classes sorted by mean.
pub fn initialize_classes(intensities: &[f64], sigma_floor: f64) -> Result<GaussianClassParams> {
    let mut distinct = intensities.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Degenerate(format!(
            "{} distinct intensities; at least 3 are needed for three classes",
            distinct.len()
        )));
    }
    let mut seeds: Vec<f64> = [25.0, 50.0, 75.0]
        .iter()
        .map(|&p| stats::percentile(intensities, p).expect("non-empty"))
        .collect();
    if !(seeds[0] < seeds[1] && seeds[1] < seeds[2]) {
        // Heavily repeated values: fall back to spread-out distinct values.
        seeds = vec![distinct[0], distinct[distinct.len() / 2], distinct[distinct.len() - 1]];
    }
    let km = stats::kmeans_1d(intensities, &seeds, 100);
    let n = intensities.len() as f64;
    let mut classes: Vec<(f64, f64, f64)> = (0..3)
        .map(|c| {
            let members = km
                .assignment
                .iter()
                .zip(intensities)
                .filter(|(a, _)| **a == c)
                .map(|(_, v)| *v);
            let (mean, sd) = stats::mean_std(members.clone());
            let count = members.count() as f64;
            if count == 0.0 {
                (km.centers[c], sigma_floor, 0.0)
            } else {
                (mean, sd.max(sigma_floor), count / n)
            }
        })
        .collect();
    classes.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(GaussianClassParams {
        mean: [classes[0].0, classes[1].0, classes[2].0],
        sigma: [classes[0].1, classes[1].1, classes[2].1],
        weight: [classes[0].2, classes[1].2, classes[2].2],
    })
}

/// Normalized mean-field prior at grid voxel `idx`.
pub fn mrf_spatial_prior(posteriors: &TissueProbabilityMaps, beta_mrf: f64, idx: usize) -> [f64; 3] {
    let mut field = [0.0f64; 3];
    posteriors.geometry().for_each_face_neighbor(idx, |j| {
        for (l, f) in field.iter_mut().enumerate() {
            *f += posteriors.maps[l][j];
        }
    });
    softmax(field.map(|f| beta_mrf * f))
}

fn softmax(logits: [f64; 3]) -> [f64; 3] {
    let m = logits[0].max(logits[1]).max(logits[2]);
    let e = logits.map(|l| (l - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

fn log_sum_exp(logits: [f64; 3]) -> f64 {
    let m = logits[0].max(logits[1]).max(logits[2]);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Masked voxels, their intensities and their in-mask 6-neighbours.
struct Lattice {
    geometry: Geometry,
    index: Vec<usize>,
    y: Vec<f64>,
    neighbors: Vec<[u32; 6]>,
}

const NO_NEIGHBOR: u32 = u32::MAX;

impl Lattice {
    fn new(vol: &Volume3D, mask: &BrainMask) -> Result<Self> {
        vol.geometry().check_same(mask.geometry(), "segmentation mask")?;
        let geometry = vol.geometry().clone();
        let index: Vec<usize> = mask.indices().collect();
        if index.is_empty() {
            return Err(Error::Input("segmentation mask is empty".into()));
        }
        if index.len() >= NO_NEIGHBOR as usize {
            return Err(Error::Input("mask too large".into()));
        }
        let mut local = vec![NO_NEIGHBOR; geometry.len()];
        for (k, &i) in index.iter().enumerate() {
            local[i] = k as u32;
        }
        let y: Vec<f64> = index.iter().map(|&i| vol.data()[i] as f64).collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite intensity inside the mask".into()));
        }
        let neighbors = index
            .iter()
            .map(|&i| {
                let mut n = [NO_NEIGHBOR; 6];
                let mut c = 0;
                geometry.for_each_face_neighbor(i, |j| {
                    n[c] = local[j];
                    c += 1;
                });
                n
            })
            .collect();
        Ok(Lattice {
            geometry,
            index,
            y,
            neighbors,
        })
    }

    fn gather(&self, maps: &TissueProbabilityMaps) -> Result<Vec<[f64; 3]>> {
        self.geometry.check_same(maps.geometry(), "posterior maps")?;
        Ok(self.index.iter().map(|&i| maps.at(i)).collect())
    }

    fn scatter(&self, q: &[[f64; 3]]) -> TissueProbabilityMaps {
        let n = self.geometry.len();
        let mut maps = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (&i, p) in self.index.iter().zip(q) {
            for l in 0..3 {
                maps[l][i] = p[l];
            }
        }
        TissueProbabilityMaps {
            geometry: self.geometry.clone(),
            maps,
        }
    }

    fn neighbor_sum(&self, q: &[[f64; 3]], k: usize) -> [f64; 3] {
        let mut s = [0.0; 3];
        for &j in &self.neighbors[k] {
            if j != NO_NEIGHBOR {
                let p = &q[j as usize];
                s[0] += p[0];
                s[1] += p[1];
                s[2] += p[2];
            }
        }
        s
    }

    /// Mean-field sweeps, each a Jacobi update from the previous sweep.
    fn e_step(&self, params: &GaussianClassParams, prev: &[[f64; 3]], beta: f64, sweeps: usize) -> Vec<[f64; 3]> {
        let ln_w = params.ln_weight();
        let mut q = prev.to_vec();
        for _ in 0..if beta == 0.0 { 1 } else { sweeps } {
            q = (0..self.y.len())
                .into_par_iter()
                .map(|k| {
                    let g = params.log_density(self.y[k]);
                    let nb = if beta == 0.0 { [0.0; 3] } else { self.neighbor_sum(&q, k) };
                    softmax([0, 1, 2].map(|l| ln_w[l] + beta * nb[l] + g[l]))
                })
                .collect();
        }
        q
    }

    fn m_step(&self, q: &mut [[f64; 3]], sigma_floor: f64) -> Result<GaussianClassParams> {
        // [Σp, Σp·y] per class, block-wise in a fixed order.
        let first: [f64; 6] = block_sum(&self.y, q, |y, p| {
            [p[0], p[1], p[2], p[0] * y, p[1] * y, p[2] * y]
        });
        let n = self.y.len() as f64;
        let mut mean = [0.0; 3];
        for l in 0..3 {
            if !(first[l] >= 1e-12 * n) {
                return Err(Error::ClassCollapse {
                    class: l,
                    weight: first[l],
                });
            }
            mean[l] = first[3 + l] / first[l];
        }
        let second: [f64; 6] = block_sum(&self.y, q, |y, p| {
            let d = [0, 1, 2].map(|l| y - mean[l]);
            [p[0] * d[0] * d[0], p[1] * d[1] * d[1], p[2] * d[2] * d[2], 0.0, 0.0, 0.0]
        });
        let total = first[0] + first[1] + first[2];
        let mut classes = [0, 1, 2].map(|l| (mean[l], (second[l] / first[l]).sqrt().max(sigma_floor), first[l] / total, l));
        classes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.3.cmp(&b.3)));
        let order = classes.map(|c| c.3);
        if order != [0, 1, 2] {
            for p in q.iter_mut() {
                *p = order.map(|o| p[o]);
            }
        }
        Ok(GaussianClassParams {
            mean: classes.map(|c| c.0),
            sigma: classes.map(|c| c.1),
            weight: classes.map(|c| c.2),
        })
    }

    fn log_likelihood(&self, params: &GaussianClassParams) -> f64 {
        let ln_w = params.ln_weight();
        let partial: Vec<f64> = self
            .y
            .par_chunks(REDUCE_BLOCK)
            .map(|ys| {
                ys.iter()
                    .map(|&y| {
                        let g = params.log_density(y);
                        log_sum_exp([0, 1, 2].map(|l| ln_w[l] + g[l]))
                    })
                    .sum::<f64>()
            })
            .collect();
        partial.iter().sum()
    }
}

fn block_sum(y: &[f64], q: &[[f64; 3]], f: impl Fn(f64, &[f64; 3]) -> [f64; 6] + Sync) -> [f64; 6] {
    let partial: Vec<[f64; 6]> = y
        .par_chunks(REDUCE_BLOCK)
        .zip(q.par_chunks(REDUCE_BLOCK))
        .map(|(ys, ps)| {
            let mut acc = [0.0; 6];
            for (&y, p) in ys.iter().zip(ps) {
                let v = f(y, p);
                for c in 0..6 {
                    acc[c] += v[c];
                }
            }
            acc
        })
        .collect();
    let mut acc = [0.0; 6];
    for p in &partial {
        for c in 0..6 {
            acc[c] += p[c];
        }
    }
    acc
}

/// One E-step: posteriors inside `mask` from `params` and the spatial prior
/// built from `prev`.
pub fn e_step(
    vol: &Volume3D,
    mask: &BrainMask,
    params: &GaussianClassParams,
    prev: &TissueProbabilityMaps,
    beta_mrf: f64,
    sweeps: usize,
) -> Result<TissueProbabilityMaps> {
    let lat = Lattice::new(vol, mask)?;
    let q = lat.e_step(params, &lat.gather(prev)?, beta_mrf, sweeps.max(1));
    Ok(lat.scatter(&q))
}

/// Weighted Gaussian parameter update. Classes are re-sorted by mean and
/// `posteriors` is permuted to match.
pub fn m_step(
    vol: &Volume3D,
    mask: &BrainMask,
    posteriors: &mut TissueProbabilityMaps,
    sigma_floor: f64,
) -> Result<GaussianClassParams> {
    let lat = Lattice::new(vol, mask)?;
    let mut q = lat.gather(posteriors)?;
    let params = lat.m_step(&mut q, sigma_floor)?;
    *posteriors = lat.scatter(&q);
    Ok(params)
}

/// Mixture log-likelihood plus `β` times the neighbour-agreement score
/// Σ_i Σ_{j∈N6(i)} q_i · q_j.
pub fn log_objective(
    vol: &Volume3D,
    mask: &BrainMask,
    posteriors: &TissueProbabilityMaps,
    params: &GaussianClassParams,
    beta_mrf: f64,
) -> Result<f64> {
    let lat = Lattice::new(vol, mask)?;
    let ll = lat.log_likelihood(params);
    if beta_mrf == 0.0 {
        return Ok(ll);
    }
    let smooth: f64 = lat
        .index
        .iter()
        .map(|&i| {
            let qi = posteriors.at(i);
            let mut s = 0.0;
            posteriors.geometry().for_each_face_neighbor(i, |j| {
                let qj = posteriors.at(j);
                s += qi[0] * qj[0] + qi[1] * qj[1] + qi[2] * qj[2];
            });
            s
        })
        .sum();
    Ok(ll + beta_mrf * smooth)
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub maps: TissueProbabilityMaps,
    pub params: GaussianClassParams,
    pub iterations: usize,
    pub converged: bool,
    /// Mixture log-likelihood of the parameters entering each iteration,
    /// followed by that of the final parameters.
    pub log_likelihood: Vec<f64>,
}

/// Initialize, then alternate E and M steps until the class means move by
/// less than 1e-4 of the intensity range or the iteration budget runs out.
///
/// ```
/// use neurotrend::phantom::{generate_phantom, PhantomSpec};
/// use neurotrend::segmentation::{segment_hmrf, SegConfig};
///
/// let spec = PhantomSpec::small();
/// let (vol, truth) = generate_phantom(&spec).unwrap();
/// let seg = segment_hmrf(&vol, &truth.brain_mask(), &SegConfig::default()).unwrap();
/// let m = seg.params.mean;
/// assert!(m[0] < m[1] && m[1] < m[2]);
/// ```
pub fn segment_hmrf(vol: &Volume3D, mask: &BrainMask, config: &SegConfig) -> Result<Segmentation> {
    config.validate()?;
    let lat = Lattice::new(vol, mask)?;
    let floor = config.sigma_floor.unwrap_or_else(|| default_sigma_floor(&lat.y));
    let range = intensity_range(&lat.y);
    let mut params = match config.init {
        InitMethod::KMeans => initialize_classes(&lat.y, floor)?,
    };
    let mut q = vec![[1.0 / 3.0; 3]; lat.y.len()];
    let mut log_likelihood = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.iterations {
        iterations += 1;
        log_likelihood.push(lat.log_likelihood(&params));
        q = lat.e_step(&params, &q, config.beta_mrf, config.sweeps);
        let next = lat.m_step(&mut q, floor)?;
        let shift = (0..3).map(|l| (next.mean[l] - params.mean[l]).abs()).fold(0.0, f64::max);
        params = next;
        log::debug!("EM iteration {iterations}: means {:?}, max shift {shift:.3e}", params.mean);
        if shift < 1e-4 * range {
            converged = true;
            break;
        }
    }
    log_likelihood.push(lat.log_likelihood(&params));
    Ok(Segmentation {
        maps: lat.scatter(&q),
        params,
        iterations,
        converged,
        log_likelihood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn line(values: &[f32]) -> (Volume3D, BrainMask) {
        let g = Geometry::new([values.len(), 1, 1], [1.0; 3]).unwrap();
        let v = Volume3D::new(g.clone(), values.to_vec()).unwrap();
        (v, BrainMask::full(g))
    }

    /// Plain GMM EM written independently of the HMRF code: scalar loops,
    /// densities straight from the formula, responsibilities by direct
    /// normalization (fine on well-scaled test data).
    struct GmmOracle {
        mean: [f64; 3],
        sigma: [f64; 3],
        weight: [f64; 3],
    }

    impl GmmOracle {
        fn density(&self, y: f64, l: usize) -> f64 {
            let s = self.sigma[l];
            self.weight[l] * (-(y - self.mean[l]).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())
        }

        fn responsibilities(&self, ys: &[f64]) -> Vec<[f64; 3]> {
            ys.iter()
                .map(|&y| {
                    let d = [self.density(y, 0), self.density(y, 1), self.density(y, 2)];
                    let s = d[0] + d[1] + d[2];
                    [d[0] / s, d[1] / s, d[2] / s]
                })
                .collect()
        }

        fn update(&mut self, ys: &[f64], r: &[[f64; 3]], floor: f64) {
            for l in 0..3 {
                let w: f64 = r.iter().map(|p| p[l]).sum();
                let m = r.iter().zip(ys).map(|(p, y)| p[l] * y).sum::<f64>() / w;
                let v = r.iter().zip(ys).map(|(p, y)| p[l] * (y - m).powi(2)).sum::<f64>() / w;
                self.mean[l] = m;
                self.sigma[l] = v.sqrt().max(floor);
                self.weight[l] = w / ys.len() as f64;
            }
        }

        fn log_likelihood(&self, ys: &[f64]) -> f64 {
            ys.iter().map(|&y| (0..3).map(|l| self.density(y, l)).sum::<f64>().ln()).sum()
        }
    }

    fn random_cube(n: usize, seed: u64) -> Volume3D {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::new([n, n, n], [1.0; 3]).unwrap();
        let data = (0..g.len())
            .map(|_| {
                let c = rng.gen_range(0..3);
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                ([10.0, 20.0, 28.0][c] + 2.5 * z) as f32
            })
            .collect();
        Volume3D::new(g, data).unwrap()
    }

    #[test]
    fn pdf_examples() {
        let p = gaussian_pdf(0.0, 0.0, 1.0, 1e-3).unwrap();
        assert!((p - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        let q = gaussian_pdf(5.0, 3.0, 2.0, 1e-3).unwrap();
        assert!((q - gaussian_pdf(3.0, 3.0, 2.0, 1e-3).unwrap() * (-0.5f64).exp()).abs() < 1e-15);
        // Midpoint quadrature over ±8σ.
        let (mu, s, n) = (7.0, 1.5, 20000);
        let h = 16.0 * s / n as f64;
        let total: f64 = (0..n)
            .map(|k| gaussian_pdf(mu - 8.0 * s + (k as f64 + 0.5) * h, mu, s, 1e-3).unwrap() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        assert!(matches!(gaussian_pdf(0.0, 0.0, 1e-4, 1e-3), Err(Error::Parameter(_))));
    }

    #[test]
    fn init_examples() {
        let spikes: Vec<f64> = [1.0, 2.0, 3.0].iter().flat_map(|&v| vec![v; 10]).collect();
        let p = initialize_classes(&spikes, 2e-3).unwrap();
        assert_eq!(p.mean, [1.0, 2.0, 3.0]);
        assert_eq!(p.sigma, [2e-3; 3]);
        assert!(matches!(initialize_classes(&[4.0; 20], 1e-3), Err(Error::Degenerate(_))));
        assert!(matches!(initialize_classes(&[1.0, 2.0, 1.0], 1e-3), Err(Error::Degenerate(_))));

        // Mostly one value: percentile seeds coincide, fallback still works.
        let mut skewed = vec![5.0; 100];
        skewed.extend([1.0, 9.0]);
        let p = initialize_classes(&skewed, 1e-3).unwrap();
        assert_eq!(p.mean, [1.0, 5.0, 9.0]);

        let (vol, truth) = generate_phantom(&PhantomSpec::default()).unwrap();
        let mask = truth.brain_mask();
        let ys: Vec<f64> = mask.indices().map(|i| vol.data()[i] as f64).collect();
        let p = initialize_classes(&ys, default_sigma_floor(&ys)).unwrap();
        for (m, t) in p.mean.iter().zip([500.0, 2000.0, 2500.0]) {
            assert!((m - t).abs() < 0.1 * t, "{:?}", p.mean);
        }
    }

    #[test]
    fn prior_examples() {
        let g = Geometry::new([3, 3, 3], [1.0; 3]).unwrap();
        let mask = BrainMask::full(g.clone());
        let centre = g.index(1, 1, 1);
        let mut q = TissueProbabilityMaps::uniform(&mask);
        assert_eq!(mrf_spatial_prior(&q, 0.0, centre), [1.0 / 3.0; 3]);
        g.for_each_face_neighbor(centre, |j| {
            q.maps[0][j] = 0.0;
            q.maps[1][j] = 1.0;
            q.maps[2][j] = 0.0;
        });
        let p = mrf_spatial_prior(&q, 0.4, centre);
        assert!(p[1] > p[0] && p[1] > p[2]);
    }

    #[test]
    fn e_step_examples() {
        let (vol, mask) = line(&[0.0, 5.0, 10.0, 5.0]);
        let params = GaussianClassParams {
            mean: [0.0, 5.0, 10.0],
            sigma: [2.0; 3],
            weight: [1.0 / 3.0; 3],
        };
        let q = e_step(&vol, &mask, &params, &TissueProbabilityMaps::uniform(&mask), 0.0, 1).unwrap();
        let labels = q.argmax_labels();
        assert_eq!(labels, vec![1, 2, 3, 2]);
        for i in 0..4 {
            assert!((q.at(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn e_step_matches_gmm_responsibilities() {
        let vol = random_cube(10, 3);
        let mask = BrainMask::full(vol.geometry().clone());
        let params = GaussianClassParams {
            mean: [9.0, 21.0, 27.0],
            sigma: [2.0, 3.0, 2.5],
            weight: [0.3, 0.5, 0.2],
        };
        let q = e_step(&vol, &mask, &params, &TissueProbabilityMaps::uniform(&mask), 0.0, 2).unwrap();
        let oracle = GmmOracle {
            mean: params.mean,
            sigma: params.sigma,
            weight: params.weight,
        };
        let ys: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
        for (i, r) in oracle.responsibilities(&ys).iter().enumerate() {
            for l in 0..3 {
                assert!((q.maps()[l][i] - r[l]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn m_step_examples() {
        let (vol, mask) = line(&[1.0, 2.0, 3.0, 10.0, 11.0, 20.0]);
        // Hard posteriors deliberately listed out of mean order.
        let hard = |i: usize| match i {
            0..=2 => 2,
            3 | 4 => 0,
            _ => 1,
        };
        let mut maps = [vec![0.0; 6], vec![0.0; 6], vec![0.0; 6]];
        for i in 0..6 {
            maps[hard(i)][i] = 1.0;
        }
        let mut q = TissueProbabilityMaps::new(vol.geometry().clone(), maps).unwrap();
        let p = m_step(&vol, &mask, &mut q, 1e-3).unwrap();
        assert_eq!(p.mean, [2.0, 10.5, 20.0]);
        assert!((p.sigma[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(p.sigma[2], 1e-3);
        assert!((p.weight.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Maps follow the reordering.
        assert_eq!(q.argmax_labels(), vec![1, 1, 1, 2, 2, 3]);

        let mut u = TissueProbabilityMaps::uniform(&mask);
        let p = m_step(&vol, &mask, &mut u, 1e-3).unwrap();
        assert!(p.mean.iter().all(|m| (m - 47.0 / 6.0).abs() < 1e-12));

        let mut dead = TissueProbabilityMaps::new(
            vol.geometry().clone(),
            [vec![0.5; 6], vec![0.5; 6], vec![0.0; 6]],
        )
        .unwrap();
        assert!(matches!(
            m_step(&vol, &mask, &mut dead, 1e-3),
            Err(Error::ClassCollapse { class: 2, .. })
        ));
    }

    #[test]
    fn smoothness_prefers_blocks() {
        let g = Geometry::new([4, 4, 4], [1.0; 3]).unwrap();
        let mask = BrainMask::full(g.clone());
        let vol = Volume3D::filled(g.clone(), 1.0).unwrap();
        let params = GaussianClassParams {
            mean: [0.0, 1.0, 2.0],
            sigma: [1.0; 3],
            weight: [1.0 / 3.0; 3],
        };
        let build = |f: &dyn Fn([usize; 3]) -> usize| {
            let mut maps = [vec![0.0; 64], vec![0.0; 64], vec![0.0; 64]];
            for i in 0..64 {
                maps[f(g.coords(i))][i] = 1.0;
            }
            TissueProbabilityMaps::new(g.clone(), maps).unwrap()
        };
        let checker = build(&|[i, j, k]| (i + j + k) % 2);
        let blocks = build(&|[i, _, _]| i / 2);
        let a = log_objective(&vol, &mask, &checker, &params, 1.0).unwrap();
        let b = log_objective(&vol, &mask, &blocks, &params, 1.0).unwrap();
        assert!(a < b);
    }

    #[test]
    fn beta_zero_matches_gmm_em() {
        let vol = random_cube(16, 9);
        let mask = BrainMask::full(vol.geometry().clone());
        let config = SegConfig {
            beta_mrf: 0.0,
            iterations: 15,
            ..SegConfig::default()
        };
        let seg = segment_hmrf(&vol, &mask, &config).unwrap();

        let ys: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
        let floor = default_sigma_floor(&ys);
        let init = initialize_classes(&ys, floor).unwrap();
        let mut oracle = GmmOracle {
            mean: init.mean,
            sigma: init.sigma,
            weight: init.weight,
        };
        let mut r = Vec::new();
        let mut ll = Vec::new();
        for _ in 0..seg.iterations {
            ll.push(oracle.log_likelihood(&ys));
            r = oracle.responsibilities(&ys);
            oracle.update(&ys, &r, floor);
        }
        for (i, p) in r.iter().enumerate() {
            for l in 0..3 {
                assert!((seg.maps.maps()[l][i] - p[l]).abs() < 1e-6);
            }
        }
        for l in 0..3 {
            assert!((seg.params.mean[l] - oracle.mean[l]).abs() < 1e-6);
        }
        for (a, b) in seg.log_likelihood.iter().zip(&ll) {
            assert!((a - b).abs() < 1e-6 * b.abs());
        }
        for w in seg.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        let obj = log_objective(&vol, &mask, &seg.maps, &seg.params, 0.0).unwrap();
        assert!((obj - oracle.log_likelihood(&ys)).abs() < 1e-9 * obj.abs());
    }

    #[test]
    fn noiseless_phantom_labels_exact_in_interior() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..PhantomSpec::small()
        };
        let (vol, truth) = generate_phantom(&spec).unwrap();
        let mask = truth.brain_mask();
        let seg = segment_hmrf(&vol, &mask, &SegConfig::default()).unwrap();
        let labels = seg.maps.argmax_labels();
        let g = vol.geometry();
        for i in mask.indices() {
            let mut interior = true;
            g.for_each_face_neighbor(i, |j| interior &= truth.labels[j] == truth.labels[i]);
            if interior {
                assert_eq!(labels[i], truth.labels[i]);
            }
        }
    }

    #[test]
    fn maps_are_a_simplex_inside_and_zero_outside() {
        let (vol, truth) = generate_phantom(&PhantomSpec::small()).unwrap();
        let mask = truth.brain_mask();
        let seg = segment_hmrf(&vol, &mask, &SegConfig::default()).unwrap();
        for i in 0..vol.len() {
            let s: f64 = seg.maps.at(i).iter().sum();
            if mask.get(i) {
                assert!((s - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn config_and_input_errors() {
        let (vol, mask) = line(&[1.0, 2.0, 3.0]);
        let bad = SegConfig {
            iterations: 0,
            ..SegConfig::default()
        };
        assert!(matches!(segment_hmrf(&vol, &mask, &bad), Err(Error::Parameter(_))));
        let empty = BrainMask::empty(vol.geometry().clone());
        assert!(matches!(segment_hmrf(&vol, &empty, &SegConfig::default()), Err(Error::Input(_))));
        let (nan, mask) = line(&[1.0, f32::NAN, 3.0]);
        assert!(matches!(segment_hmrf(&nan, &mask, &SegConfig::default()), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn prior_is_normalized(vals in prop::collection::vec(0.0f64..1.0, 27 * 3), beta in 0.0f64..5.0, at in 0usize..27) {
            let g = Geometry::new([3, 3, 3], [1.0; 3]).unwrap();
            let mut maps = [vec![], vec![], vec![]];
            for c in vals.chunks(3) {
                let s = c[0] + c[1] + c[2] + 1e-9;
                for l in 0..3 {
                    maps[l].push(c[l] / s);
                }
            }
            let q = TissueProbabilityMaps::new(g, maps).unwrap();
            let p = mrf_spatial_prior(&q, beta, at);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
