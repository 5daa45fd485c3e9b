//! Rotation representations: unit quaternions, axis-angle vectors and
//! rotation matrices.
//!
//! Quaternions follow the Hamilton convention and are stored scalar-first
//! as `(w, x, y, z)`. A rotation by angle `a` about unit axis `n` is
//! `(cos(a/2), sin(a/2) n)`. Every other module in the crate uses this
//! convention.

use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this value cannot be normalized.
pub const NORMALIZE_EPS: f64 = 1e-12;
/// Tolerance on `|q| - 1` accepted by operations that require unit input.
pub const UNIT_TOL: f64 = 1e-6;
/// Above this `|dot|`, slerp falls back to normalized lerp.
const SLERP_LERP_THRESHOLD: f64 = 1.0 - 1e-8;

pub type Vec3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis`. A zero axis yields the identity.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n <= NORMALIZE_EPS {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let v = axis * (s / n);
        Self::new(c, v.x, v.y, v.z)
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn inverse(&self) -> Result<Self> {
        let n2 = self.norm_squared();
        if n2 <= NORMALIZE_EPS * NORMALIZE_EPS {
            return Err(Error::Domain("inverse of a zero quaternion".into()));
        }
        let c = self.conjugate();
        Ok(Self::new(c.w / n2, c.x / n2, c.y / n2, c.z / n2))
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if n <= NORMALIZE_EPS || !n.is_finite() {
            return Err(Error::Degenerate(format!("quaternion norm {n:e} cannot be normalized")));
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Representative with non-negative scalar part.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            -*self
        } else {
            *self
        }
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(&self) -> Result<RotMatrix> {
        if !self.is_unit(UNIT_TOL) {
            return Err(Error::Precondition(format!("quaternion norm {} is not unit", self.norm())));
        }
        Ok(RotMatrix(quat_matrix(self)))
    }

    /// Axis-angle vector with angle in `[0, pi]`.
    pub fn to_axis_angle(&self) -> AxisAngle {
        let q = self.canonical();
        let v = q.vector();
        let s = v.norm();
        if s <= NORMALIZE_EPS {
            // Small-angle limit: angle ~ 2|v|, axis ~ v/|v|.
            let r = v * 2.0;
            return AxisAngle::new(r.x, r.y, r.z);
        }
        let angle = 2.0 * s.atan2(q.w);
        let r = v * (angle / s);
        AxisAngle::new(r.x, r.y, r.z)
    }

    /// Rotate a vector by a unit quaternion.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = self.vector();
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(&t)
    }

    /// Geodesic angle in `[0, pi]` between the rotations of two unit quaternions.
    pub fn angle_to(&self, other: &Self) -> f64 {
        // atan2 keeps full precision near 0, where acos of the dot product does not.
        let r = self.conjugate() * *other;
        2.0 * r.vector().norm().atan2(r.w.abs())
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Hamilton product, free-function form.
pub fn quat_mul(a: Quaternion, b: Quaternion) -> Quaternion {
    a * b
}

/// Matrix of `q` without checking that it is unit. Only orthonormal when `|q| = 1`.
pub(crate) fn quat_matrix(q: &Quaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull a gradient w.r.t. the matrix entries back to the quaternion components
/// of [`quat_matrix`]. Returns `dL/d(w, x, y, z)`.
pub(crate) fn quat_matrix_backward(q: &Quaternion, g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Rotation vector: direction is the axis, magnitude the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl AxisAngle {
    pub const fn new(rx: f64, ry: f64, rz: f64) -> Self {
        Self { rx, ry, rz }
    }

    pub fn from_vector(v: &Vec3) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.rx, self.ry, self.rz)
    }

    pub fn angle(&self) -> f64 {
        self.vector().norm()
    }

    pub fn to_quat(&self) -> Quaternion {
        let v = self.vector();
        Quaternion::from_axis_angle(&v, v.norm())
    }
}

pub fn axis_angle_to_quat(a: &AxisAngle) -> Quaternion {
    a.to_quat()
}

pub fn quat_to_axis_angle(q: &Quaternion) -> AxisAngle {
    q.to_axis_angle()
}

/// Orthonormal 3x3 matrix with determinant +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotMatrix(pub Matrix3<f64>);

impl RotMatrix {
    pub fn identity() -> Self {
        RotMatrix(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotMatrix(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn is_rotation(&self, tol: f64) -> bool {
        let gram = self.0.transpose() * self.0 - Matrix3::identity();
        gram.amax() <= tol && (self.0.determinant() - 1.0).abs() <= tol
    }
}

impl Mul for RotMatrix {
    type Output = RotMatrix;
    fn mul(self, rhs: RotMatrix) -> RotMatrix {
        RotMatrix(self.0 * rhs.0)
    }
}

pub fn quat_to_matrix(q: &Quaternion) -> Result<RotMatrix> {
    q.to_matrix()
}

/// Spherical linear interpolation along the shortest arc.
pub fn slerp(a: &Quaternion, b: &Quaternion, t: f64) -> Quaternion {
    let mut b = *b;
    let mut d = a.dot(&b);
    if d < 0.0 {
        b = -b;
        d = -d;
    }
    if t == 0.0 {
        return *a;
    }
    if t == 1.0 {
        return b;
    }
    if d > SLERP_LERP_THRESHOLD {
        let q =
            Quaternion::new(a.w + t * (b.w - a.w), a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.z + t * (b.z - a.z));
        // a and b are unit and nearly equal, so the lerp never vanishes.
        return q.scale(1.0 / q.norm());
    }
    let theta = d.acos();
    let s = theta.sin();
    let ka = ((1.0 - t) * theta).sin() / s;
    let kb = (t * theta).sin() / s;
    let q = Quaternion::new(ka * a.w + kb * b.w, ka * a.x + kb * b.x, ka * a.y + kb * b.y, ka * a.z + kb * b.z);
    q.scale(1.0 / q.norm())
}
