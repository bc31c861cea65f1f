//! In-memory voxel grids shared by every stage.
//!
//! Voxels are stored x-fastest: the linear index of `(i, j, k)` is
//! `i + nx * (j + ny * k)`. Physical coordinates ignore the orientation
//! matrix (it is carried for I/O only) and are `origin + spacing * index`.

use crate::error::{Error, Result};

const ORIENTATION_TOL: f64 = 1e-6;

/// Shape and physical placement of a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Millimeters per voxel along each axis.
    pub spacing: [f64; 3],
    /// Physical position (mm) of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
    /// Direction cosines, one unit row per axis.
    pub orientation: [[f64; 3]; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin: [0.0; 3],
            orientation: IDENTITY3,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "dimensions must be positive, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        for row in &self.orientation {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > ORIENTATION_TOL {
                return Err(Error::InvalidVolume(format!(
                    "orientation row {row:?} is not unit norm"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position (mm) of a (possibly fractional) voxel coordinate.
    #[inline]
    pub fn to_physical(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + self.spacing[0] * v[0],
            self.origin[1] + self.spacing[1] * v[1],
            self.origin[2] + self.spacing[2] * v[2],
        ]
    }

    /// Fractional voxel coordinate of a physical point.
    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical center of the grid: midpoint between the first and last voxel centers.
    pub fn center_mm(&self) -> [f64; 3] {
        self.to_physical([
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ])
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Same dims and spacing (origin and orientation are not compared).
    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0))
    }

    pub(crate) fn check_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Visit the (up to six) face neighbours of a voxel.
    #[inline]
    pub fn for_each_face_neighbor(&self, idx: usize, mut f: impl FnMut(usize)) {
        let [i, j, k] = self.coords(idx);
        let [nx, ny, nz] = self.dims;
        let sy = nx;
        let sz = nx * ny;
        if i > 0 {
            f(idx - 1);
        }
        if i + 1 < nx {
            f(idx + 1);
        }
        if j > 0 {
            f(idx - sy);
        }
        if j + 1 < ny {
            f(idx + sy);
        }
        if k > 0 {
            f(idx - sz);
        }
        if k + 1 < nz {
            f(idx + sz);
        }
    }
}

pub const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// A 3-D scalar image with physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    geometry: Geometry,
    data: Vec<f32>,
    pub intensity_units: String,
}

impl Volume3D {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::InvalidVolume(format!(
                "expected {} voxels for dims {:?}, got {}",
                geometry.len(),
                geometry.dims,
                data.len()
            )));
        }
        Ok(Volume3D {
            geometry,
            data,
            intensity_units: String::new(),
        })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        let n = geometry.len();
        Self::new(geometry, vec![value; n])
    }

    /// Build a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(geometry, data)
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.geometry.voxel_volume_mm3()
    }

    /// Same geometry, new payload.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        let mut v = Self::new(self.geometry.clone(), data)?;
        v.intensity_units = self.intensity_units.clone();
        Ok(v)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Volume3D {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            intensity_units: self.intensity_units.clone(),
        }
    }
}

/// Product of the grid spacings, in mm³.
pub fn voxel_volume_mm3(vol: &Volume3D) -> f64 {
    vol.voxel_volume_mm3()
}

/// Binary voxel mask aligned with a [`Geometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct BrainMask {
    geometry: Geometry,
    bits: Vec<bool>,
}

impl BrainMask {
    pub fn new(geometry: Geometry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != geometry.len() {
            return Err(Error::InvalidVolume(format!(
                "mask has {} voxels, geometry needs {}",
                bits.len(),
                geometry.len()
            )));
        }
        Ok(BrainMask { geometry, bits })
    }

    pub fn full(geometry: Geometry) -> Self {
        let n = geometry.len();
        BrainMask {
            geometry,
            bits: vec![true; n],
        }
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.len();
        BrainMask {
            geometry,
            bits: vec![false; n],
        }
    }

    /// Voxels whose value is strictly greater than `threshold`.
    pub fn from_threshold(vol: &Volume3D, threshold: f32) -> Self {
        BrainMask {
            geometry: vol.geometry().clone(),
            bits: vol.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    /// Interpret a volume as a mask: nonzero voxels are set.
    pub fn from_volume(vol: &Volume3D) -> Self {
        BrainMask {
            geometry: vol.geometry().clone(),
            bits: vol.data().iter().map(|&v| v != 0.0).collect(),
        }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            geometry: self.geometry.clone(),
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            intensity_units: "mask".into(),
        }
    }

    /// Sørensen–Dice overlap with another mask on the same grid.
    pub fn dice(&self, other: &BrainMask) -> f64 {
        let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
        for (&x, &y) in self.bits.iter().zip(other.bits.iter()) {
            a += x as usize;
            b += y as usize;
            inter += (x && y) as usize;
        }
        if a + b == 0 {
            return 1.0;
        }
        2.0 * inter as f64 / (a + b) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(spacing: [f64; 3]) -> Geometry {
        Geometry::new([2, 3, 4], spacing).unwrap()
    }

    #[test]
    fn voxel_volume_is_product_of_spacings() {
        let cases = [
            ([1.0, 1.0, 1.0], 1.0),
            ([1.0, 1.0, 1.2], 1.2),
            ([0.5, 0.5, 2.0], 0.5),
        ];
        for (spacing, expected) in cases {
            let v = Volume3D::filled(geom(spacing), 0.0).unwrap();
            assert!((voxel_volume_mm3(&v) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        let mut g = geom([1.0; 3]);
        g.orientation[0] = [1.0, 1.0, 0.0];
        assert!(g.validate().is_err());
        assert!(Volume3D::new(geom([1.0; 3]), vec![0.0; 5]).is_err());
    }

    #[test]
    fn index_and_coords_round_trip() {
        let g = geom([1.0; 3]);
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    #[test]
    fn face_neighbors_at_corner() {
        let g = geom([1.0; 3]);
        let mut n = vec![];
        g.for_each_face_neighbor(0, |i| n.push(i));
        assert_eq!(n, vec![1, 2, 6]);
    }

    #[test]
    fn dice_of_identical_masks_is_one() {
        let g = geom([1.0; 3]);
        let m = BrainMask::new(g.clone(), (0..g.len()).map(|i| i % 3 == 0).collect()).unwrap();
        assert_eq!(m.dice(&m), 1.0);
        assert_eq!(m.dice(&BrainMask::empty(g)), 0.0);
    }
}
