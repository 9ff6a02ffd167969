//! Rotation and rigid-transform algebra.
//!
//! Rotations are stored as 3×3 matrices. Every perturbation in the crate is
//! left-multiplicative, `R = Exp(δθ) · R̂`, and goes through [`perturb`].

use std::ops::Mul;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Angles below this use the series expansion of the exponential map.
const SMALL_ANGLE: f64 = 1e-8;
/// Frobenius drift of `R Rᵀ - I` that triggers re-orthonormalization.
const ORTHO_DRIFT: f64 = 1e-9;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle too close to pi for a unique logarithm (trace = {trace})")]
    AngleNearPi { trace: f64 },
}

/// Skew-symmetric matrix such that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Wraps a matrix, projecting it back onto SO(3) if it has drifted.
    pub fn from_matrix(m: Mat3) -> Self {
        let mut r = Self(m);
        r.renormalize();
        r
    }

    /// Wraps a matrix without any check. The caller guarantees orthonormality.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Self(m)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        exp_so3(&(axis.normalize() * angle))
    }

    /// Intrinsic Z-Y-X (yaw, pitch, roll) Euler angles: `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rz = exp_so3(&Vec3::new(0.0, 0.0, yaw));
        let ry = exp_so3(&Vec3::new(0.0, pitch, 0.0));
        let rx = exp_so3(&Vec3::new(roll, 0.0, 0.0));
        rz * ry * rx
    }

    /// `(roll, pitch, yaw)` for the Z-Y-X convention of [`Rotation::from_euler_zyx`].
    pub fn euler_zyx(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        (roll, pitch, yaw)
    }

    /// Builds a rotation from a w-first quaternion; the input is normalized.
    pub fn from_quaternion_wxyz(q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Self(*uq.to_rotation_matrix().matrix())
    }

    /// w-first unit quaternion with non-negative scalar part.
    pub fn to_quaternion_wxyz(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        if w < 0.0 {
            [-w, -x, -y, -z]
        } else {
            [w, x, y, z]
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Frobenius norm of `R Rᵀ - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0 * self.0.transpose() - Mat3::identity()).norm()
    }

    /// Polar projection onto SO(3) when drift exceeds the tolerance.
    pub fn renormalize(&mut self) {
        if self.orthonormality_error() <= ORTHO_DRIFT {
            return;
        }
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        self.0 = u * d * v_t;
    }

    /// Geodesic angle to `other`, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        // atan2 keeps full precision near identity, where acos does not
        let d = self.0.transpose() * other.0;
        let sin = 0.5 * vee(&(d - d.transpose())).norm();
        let cos = 0.5 * (d.trace() - 1.0);
        sin.atan2(cos)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rodrigues exponential map.
pub fn exp_so3(theta: &Vec3) -> Rotation {
    let angle = theta.norm();
    let k = skew(theta);
    if angle < SMALL_ANGLE {
        return Rotation(Mat3::identity() + k + 0.5 * k * k);
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Rotation(Mat3::identity() + a * k + b * k * k)
}

/// Principal logarithm. Fails when the angle is within ~1e-3 rad of pi,
/// where the axis sign is ambiguous.
pub fn log_so3(r: &Rotation) -> Result<Vec3, GeometryError> {
    let m = r.matrix();
    let trace = m.trace();
    if trace <= -1.0 + 1e-6 {
        return Err(GeometryError::AngleNearPi { trace });
    }
    let cos = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let w = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    if angle < 1e-7 {
        // sin(a)/a ~ 1 - a^2/6
        return Ok(0.5 * w * (1.0 + angle * angle / 6.0));
    }
    Ok(w * (angle / (2.0 * angle.sin())))
}

/// Left perturbation `Exp(dtheta) · R`.
pub fn perturb(r: &Rotation, dtheta: &Vec3) -> Rotation {
    exp_so3(dtheta) * *r
}

/// Left difference `log(a · bᵀ)`, the inverse of [`perturb`]: `left_minus(perturb(b, d), b) == d`.
pub fn left_minus(a: &Rotation, b: &Rotation) -> Result<Vec3, GeometryError> {
    log_so3(&(a * &b.transpose()))
}

/// Rigid transform `{R, p}` mapping points of the child frame into the parent frame:
/// `x_parent = R x_child + p`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Transform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation.rotate(x) + self.translation
    }

    /// Maps a parent-frame point into the child frame.
    pub fn apply_inverse(&self, x: &Vec3) -> Vec3 {
        self.rotation.matrix().transpose() * (x - self.translation)
    }

    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: &self.rotation * &other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform { rotation: rt, translation: -(rt.rotate(&self.translation)) }
    }
}
