use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Mat3 = [[f64; 3]; 3];

/// Six-parameter rigid motion about a fixed center.
///
/// Maps a physical point `p` (mm) to `R (p - c) + c + t` where
/// `R = Rz(rz) * Ry(ry) * Rx(rx)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// `(rx, ry, rz)` in radians, each in `(-π, π]`.
    pub euler_rad: [f64; 3],
    pub translation_mm: [f64; 3],
    pub center_mm: [f64; 3],
}

/// Wrap an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

pub fn rotation_matrix(euler: [f64; 3]) -> Mat3 {
    let (sa, ca) = euler[0].sin_cos();
    let (sb, cb) = euler[1].sin_cos();
    let (sg, cg) = euler[2].sin_cos();
    [
        [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
        [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

/// Inverse of [`rotation_matrix`] for a proper rotation.
pub fn euler_from_matrix(r: &Mat3) -> [f64; 3] {
    let cb = (r[0][0] * r[0][0] + r[1][0] * r[1][0]).sqrt();
    let (rx, ry, rz) = if cb > 1e-12 {
        (
            r[2][1].atan2(r[2][2]),
            (-r[2][0]).atan2(cb),
            r[1][0].atan2(r[0][0]),
        )
    } else {
        // Gimbal lock: only rz ± rx is determined; pin rx to zero.
        ((0.0f64), (-r[2][0]).atan2(cb), (-r[0][1]).atan2(r[1][1]))
    };
    [normalize_angle(rx), normalize_angle(ry), normalize_angle(rz)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

impl RigidTransform {
    pub fn identity(center_mm: [f64; 3]) -> Self {
        RigidTransform {
            euler_rad: [0.0; 3],
            translation_mm: [0.0; 3],
            center_mm,
        }
    }

    pub fn new(euler_rad: [f64; 3], translation_mm: [f64; 3], center_mm: [f64; 3]) -> Self {
        RigidTransform {
            euler_rad: euler_rad.map(normalize_angle),
            translation_mm,
            center_mm,
        }
    }

    /// Parameter vector `[tx, ty, tz, rx, ry, rz]`.
    pub fn params(&self) -> [f64; 6] {
        let [tx, ty, tz] = self.translation_mm;
        let [rx, ry, rz] = self.euler_rad;
        [tx, ty, tz, rx, ry, rz]
    }

    pub fn from_params(p: &[f64], center_mm: [f64; 3]) -> Self {
        Self::new([p[3], p[4], p[5]], [p[0], p[1], p[2]], center_mm)
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_matrix(self.euler_rad)
    }

    pub fn apply_to_point(&self, p: [f64; 3]) -> [f64; 3] {
        apply_with(&self.rotation(), self.center_mm, self.translation_mm, p)
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation());
        let t = mat_vec(&rt, self.translation_mm).map(|v| -v);
        RigidTransform {
            euler_rad: euler_from_matrix(&rt),
            translation_mm: t,
            center_mm: self.center_mm,
        }
    }

    /// `self ∘ other`: apply `other` first. The result uses `other`'s center.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let ra = self.rotation();
        let rb = other.rotation();
        let r = mat_mul(&ra, &rb);
        let cb = other.center_mm;
        let shifted = [
            cb[0] + other.translation_mm[0] - self.center_mm[0],
            cb[1] + other.translation_mm[1] - self.center_mm[1],
            cb[2] + other.translation_mm[2] - self.center_mm[2],
        ];
        let rs = mat_vec(&ra, shifted);
        let t = [
            rs[0] + self.center_mm[0] + self.translation_mm[0] - cb[0],
            rs[1] + self.center_mm[1] + self.translation_mm[1] - cb[1],
            rs[2] + self.center_mm[2] + self.translation_mm[2] - cb[2],
        ];
        RigidTransform {
            euler_rad: euler_from_matrix(&r),
            translation_mm: t,
            center_mm: cb,
        }
    }

    /// Rotation angle (radians) of the rotation part, from its trace.
    pub fn rotation_angle(&self) -> f64 {
        let r = self.rotation();
        let tr = r[0][0] + r[1][1] + r[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

#[inline]
pub(crate) fn apply_with(r: &Mat3, c: [f64; 3], t: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    let q = mat_vec(r, d);
    [q[0] + c[0] + t[0], q[1] + c[1] + t[1], q[2] + c[2] + t[2]]
}

/// JSON form of a registration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub euler_rad: [f64; 3],
    pub translation_mm: [f64; 3],
    pub center_mm: [f64; 3],
    pub final_cost: f64,
}

impl TransformRecord {
    pub fn new(t: &RigidTransform, final_cost: f64) -> Self {
        TransformRecord {
            euler_rad: t.euler_rad,
            translation_mm: t.translation_mm,
            center_mm: t.center_mm,
            final_cost,
        }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(self.euler_rad, self.translation_mm, self.center_mm)
    }
}
