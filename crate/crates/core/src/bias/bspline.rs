//! Least-squares tensor-product cubic B-spline fitting on a regular control
//! grid spanning a voxel grid.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::volume::{BrainMask, Geometry};

/// Uniform cubic B-spline basis values for local coordinate `t` in `[0, 1]`.
#[inline]
pub fn cubic_basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

#[derive(Debug, Clone)]
struct AxisBasis {
    /// First control index influencing each voxel along this axis.
    first: Vec<usize>,
    weights: Vec<[f64; 4]>,
    n_ctrl: usize,
}

impl AxisBasis {
    fn new(n: usize, spacing: f64, control_spacing: f64) -> Self {
        let extent = (n.saturating_sub(1)) as f64 * spacing;
        let spans = ((extent / control_spacing).ceil() as usize).max(1);
        let h = if extent > 0.0 { extent / spans as f64 } else { control_spacing };
        let mut first = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let u = i as f64 * spacing / h;
            let span = (u.floor() as usize).min(spans - 1);
            first.push(span);
            weights.push(cubic_basis(u - span as f64));
        }
        AxisBasis {
            first,
            weights,
            n_ctrl: spans + 3,
        }
    }
}

/// A control grid bound to one voxel grid and one fitting mask. The normal
/// matrix depends only on those, so it is assembled and factored once.
pub struct SplineFitter {
    geometry: Geometry,
    axes: [AxisBasis; 3],
    mask: Vec<usize>,
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
}

impl SplineFitter {
    /// `damping` is relative to the mean diagonal of the normal matrix.
    pub fn new(geometry: &Geometry, mask: &BrainMask, control_spacing_mm: f64, damping: f64) -> Result<Self> {
        let axes = [0, 1, 2].map(|a| AxisBasis::new(geometry.dims[a], geometry.spacing[a], control_spacing_mm));
        let m = axes[0].n_ctrl * axes[1].n_ctrl * axes[2].n_ctrl;
        let mask: Vec<usize> = mask.indices().collect();
        if mask.is_empty() {
            return Err(Error::Input("spline fit mask is empty".into()));
        }

        let mut gram = vec![0.0f64; m * m];
        let mut idx = [0usize; 64];
        let mut w = [0.0f64; 64];
        for &v in &mask {
            let n = local_support(geometry, &axes, v, &mut idx, &mut w);
            for a in 0..n {
                let row = idx[a] * m;
                let wa = w[a];
                for b in a..n {
                    gram[row + idx[b]] += wa * w[b];
                }
            }
        }
        // Only (row <= col) pairs in local index order were filled; control
        // indices are increasing in local order, so that is the upper triangle.
        let mut g = DMatrix::<f64>::zeros(m, m);
        let mut trace = 0.0;
        for r in 0..m {
            for c in r..m {
                let v = gram[r * m + c];
                g[(r, c)] = v;
                g[(c, r)] = v;
            }
            trace += gram[r * m + r];
        }
        let lambda = damping * (trace / m as f64).max(f64::MIN_POSITIVE);
        for r in 0..m {
            g[(r, r)] += lambda;
        }
        let chol = g
            .cholesky()
            .ok_or_else(|| Error::Degenerate("spline normal matrix is not positive definite".into()))?;
        Ok(SplineFitter {
            geometry: geometry.clone(),
            axes,
            mask,
            chol,
        })
    }

    pub fn n_controls(&self) -> usize {
        self.axes.iter().map(|a| a.n_ctrl).product()
    }

    /// Indices of the voxels used for fitting.
    pub fn mask_indices(&self) -> &[usize] {
        &self.mask
    }

    /// Fit control coefficients to `values` (one per mask voxel, in
    /// [`Self::mask_indices`] order).
    pub fn fit(&self, values: &[f64]) -> Vec<f64> {
        let m = self.n_controls();
        let mut rhs = DVector::<f64>::zeros(m);
        let mut idx = [0usize; 64];
        let mut w = [0.0f64; 64];
        for (&v, &y) in self.mask.iter().zip(values) {
            let n = local_support(&self.geometry, &self.axes, v, &mut idx, &mut w);
            for a in 0..n {
                rhs[idx[a]] += w[a] * y;
            }
        }
        self.chol.solve(&rhs).iter().copied().collect()
    }

    /// Evaluate a coefficient set at every voxel of the grid.
    pub fn evaluate(&self, coeffs: &[f64]) -> Vec<f64> {
        let [nx, ny, nz] = self.geometry.dims;
        let [ax, ay, az] = &self.axes;
        let (mx, my) = (ax.n_ctrl, ay.n_ctrl);
        let mut out = Vec::with_capacity(self.geometry.len());
        for k in 0..nz {
            for j in 0..ny {
                // Contract z and y first; the remaining x sum is four terms.
                let mut row = vec![0.0f64; mx];
                for (c, r) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for dz in 0..4 {
                        let cz = az.first[k] + dz;
                        for dy in 0..4 {
                            let cy = ay.first[j] + dy;
                            s += az.weights[k][dz] * ay.weights[j][dy] * coeffs[c + mx * (cy + my * cz)];
                        }
                    }
                    *r = s;
                }
                for i in 0..nx {
                    let f = ax.first[i];
                    out.push((0..4).map(|dx| ax.weights[i][dx] * row[f + dx]).sum());
                }
            }
        }
        out
    }
}

#[inline]
fn local_support(g: &Geometry, axes: &[AxisBasis; 3], v: usize, idx: &mut [usize; 64], w: &mut [f64; 64]) -> usize {
    let [i, j, k] = g.coords(v);
    let (mx, my) = (axes[0].n_ctrl, axes[1].n_ctrl);
    let (fx, fy, fz) = (axes[0].first[i], axes[1].first[j], axes[2].first[k]);
    let (wx, wy, wz) = (&axes[0].weights[i], &axes[1].weights[j], &axes[2].weights[k]);
    let mut n = 0;
    for dz in 0..4 {
        for dy in 0..4 {
            let base = mx * ((fy + dy) + my * (fz + dz));
            let wyz = wy[dy] * wz[dz];
            for dx in 0..4 {
                idx[n] = base + fx + dx;
                w[n] = wx[dx] * wyz;
                n += 1;
            }
        }
    }
    n
}
