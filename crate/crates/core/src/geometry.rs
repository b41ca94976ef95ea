//! Quaternions, rotation matrices and the SLERP-sampled frames that orient
//! each tri-plane group.
//!
//! Quaternions are scalar-first: `(s, vx, vy, vz)`. The matrix produced by
//! [`quat_to_matrix`] is the transpose of the textbook Hamilton rotation
//! matrix; it is still a proper rotation and is used consistently for every
//! frame in the crate.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub s: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(s: f64, vx: f64, vy: f64, vz: f64) -> Self {
        Self { s, vx, vy, vz }
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.s * other.s + self.vx * other.vx + self.vy * other.vy + self.vz * other.vz
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(&self) -> Quaternion {
        self.scale(1.0 / self.norm())
    }

    pub fn scale(&self, k: f64) -> Quaternion {
        Quaternion::new(self.s * k, self.vx * k, self.vy * k, self.vz * k)
    }

    pub fn add(&self, o: &Quaternion) -> Quaternion {
        Quaternion::new(self.s + o.s, self.vx + o.vx, self.vy + o.vy, self.vz + o.vz)
    }

    pub fn neg(&self) -> Quaternion {
        self.scale(-1.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.s, self.vx, self.vy, self.vz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// A proper rotation stored as a 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(pub Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Wraps `m` after checking orthogonality and `det = +1` within `tol`.
    pub fn try_from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        let r = RotationMatrix(m);
        if r.orthogonality_error() > tol || (m.determinant() - 1.0).abs() > tol {
            return Err(Error::InvalidArgument("matrix is not a proper rotation".into()));
        }
        Ok(r)
    }

    /// Largest elementwise deviation of `R Rᵀ` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.0 * self.0.transpose() - Matrix3::identity();
        d.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn apply_inverse(&self, v: &Vec3) -> Vec3 {
        self.0.tr_mul(v)
    }

    pub fn transpose(&self) -> RotationMatrix {
        RotationMatrix(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * other.0)
    }

    pub fn column(&self, i: usize) -> Vec3 {
        self.0.column(i).into_owned()
    }

    /// Rotation angle of `Rᵀ_self · other`, in radians.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let rel = self.0.transpose() * other.0;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Rotation about the z axis by `theta`.
    pub fn about_z(theta: f64) -> RotationMatrix {
        let (s, c) = theta.sin_cos();
        RotationMatrix(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Inverse of [`quat_to_matrix`]: the unit quaternion (with `s ≥ 0` where
    /// possible) whose matrix is `self`.
    pub fn to_quaternion(&self) -> Quaternion {
        // quat_to_matrix yields the transpose of the Hamilton matrix, so read
        // the Hamilton quaternion off Rᵀ.
        let m = self.0.transpose();
        let tr = m.trace();
        let q = if tr > 0.0 {
            let k = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * k,
                (m[(2, 1)] - m[(1, 2)]) / k,
                (m[(0, 2)] - m[(2, 0)]) / k,
                (m[(1, 0)] - m[(0, 1)]) / k,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let k = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / k,
                0.25 * k,
                (m[(0, 1)] + m[(1, 0)]) / k,
                (m[(0, 2)] + m[(2, 0)]) / k,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let k = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / k,
                (m[(0, 1)] + m[(1, 0)]) / k,
                0.25 * k,
                (m[(1, 2)] + m[(2, 1)]) / k,
            )
        } else {
            let k = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / k,
                (m[(0, 2)] + m[(2, 0)]) / k,
                (m[(1, 2)] + m[(2, 1)]) / k,
                0.25 * k,
            )
        };
        let q = q.normalized();
        if q.s < 0.0 {
            q.neg()
        } else {
            q
        }
    }
}

/// The K tri-plane frame rotations.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub quaternions: Vec<Quaternion>,
    pub rotations: Vec<RotationMatrix>,
}

impl FrameSet {
    pub fn k(&self) -> usize {
        self.rotations.len()
    }
}

/// The two SLERP endpoints: the identity and a quaternion orthogonal to it.
pub fn default_endpoints() -> (Quaternion, Quaternion) {
    let c = 1.0 / 3.0_f64.sqrt();
    (Quaternion::IDENTITY, Quaternion::new(0.0, c, c, c))
}

/// Rotation matrix of a unit quaternion `(x, y, z, w) = (s, vx, vy, vz)`:
///
/// ```text
/// | 1-2z²-2w²   2yz+2xw    2yw-2xz  |
/// | 2yz-2xw     1-2y²-2w²  2zw+2xy  |
/// | 2yw+2xz     2zw-2xy    1-2y²-2z²|
/// ```
pub fn quat_to_matrix(q: &Quaternion) -> Result<RotationMatrix> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitQuaternion(n));
    }
    let (x, y, z, w) = (q.s, q.vx, q.vy, q.vz);
    Ok(RotationMatrix(Matrix3::new(
        1.0 - 2.0 * z * z - 2.0 * w * w,
        2.0 * y * z + 2.0 * x * w,
        2.0 * y * w - 2.0 * x * z,
        2.0 * y * z - 2.0 * x * w,
        1.0 - 2.0 * y * y - 2.0 * w * w,
        2.0 * z * w + 2.0 * x * y,
        2.0 * y * w + 2.0 * x * z,
        2.0 * z * w - 2.0 * x * y,
        1.0 - 2.0 * y * y - 2.0 * z * z,
    )))
}

/// `K` frames at equal angular steps from `q1` towards `q2`:
/// `q_i = [sin((1 - i/K)φ) q1 + sin((i/K)φ) q2] / sin φ`, `i = 0..K`,
/// with `φ = arccos(q1ᵀq2)`. `q2` itself is never emitted.
pub fn slerp_frames(q1: &Quaternion, q2: &Quaternion, k: usize) -> Result<FrameSet> {
    if k == 0 {
        return Err(Error::ZeroGroups);
    }
    for q in [q1, q2] {
        let n = q.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitQuaternion(n));
        }
    }
    let cos_phi = q1.dot(q2);
    if cos_phi.abs() >= 1.0 - 1e-9 {
        return Err(Error::CollinearEndpoints);
    }
    let phi = cos_phi.acos();
    let sin_phi = phi.sin();
    let mut quaternions = Vec::with_capacity(k);
    let mut rotations = Vec::with_capacity(k);
    for i in 0..k {
        let t = i as f64 / k as f64;
        let q = q1.scale(((1.0 - t) * phi).sin() / sin_phi).add(&q2.scale((t * phi).sin() / sin_phi)).normalized();
        rotations.push(quat_to_matrix(&q)?);
        quaternions.push(q);
    }
    Ok(FrameSet { quaternions, rotations })
}

/// Frame whose +z axis is `dir`. The x axis is the world axis least aligned
/// with `dir` (lowest index on ties), orthogonalized against it.
pub fn frame_from_direction(dir: &Vec3) -> RotationMatrix {
    let d = dir.normalize();
    let abs = [d.x.abs(), d.y.abs(), d.z.abs()];
    let mut axis = 0;
    for i in 1..3 {
        if abs[i] < abs[axis] {
            axis = i;
        }
    }
    let mut e = Vec3::zeros();
    e[axis] = 1.0;
    let x = (e - d * d.dot(&e)).normalize();
    let y = d.cross(&x);
    RotationMatrix(Matrix3::from_columns(&[x, y, d]))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn quaternion() -> impl Strategy<Value = Quaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("non-degenerate", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-3)
            .prop_map(|a| Quaternion::new(a[0], a[1], a[2], a[3]).normalized())
    }

    proptest! {
        #[test]
        fn unit_quaternions_give_proper_rotations(q in quaternion()) {
            let m = quat_to_matrix(&q).unwrap();
            prop_assert!(m.orthogonality_error() < 1e-12);
            prop_assert!((m.det() - 1.0).abs() < 1e-12);
            let back = quat_to_matrix(&m.to_quaternion()).unwrap();
            prop_assert!((back.0 - m.0).abs().max() < 1e-9);
            let neg = quat_to_matrix(&q.neg()).unwrap();
            prop_assert!((neg.0 - m.0).abs().max() < 1e-15);
        }

        #[test]
        fn slerp_steps_are_equal(a in quaternion(), b in quaternion(), k in 1usize..8) {
            prop_assume!(a.dot(&b).abs() < 0.99);
            let f = slerp_frames(&a, &b, k).unwrap();
            prop_assert_eq!(f.k(), k);
            prop_assert!((f.quaternions[0].dot(&a) - 1.0).abs() < 1e-12);
            let step = a.dot(&b).clamp(-1.0, 1.0).acos() / k as f64;
            for w in f.quaternions.windows(2) {
                prop_assert!((w[0].norm() - 1.0).abs() < 1e-12);
                prop_assert!((w[0].dot(&w[1]).clamp(-1.0, 1.0).acos() - step).abs() < 1e-7);
            }
        }

        #[test]
        fn direction_frames_point_along_the_direction(d in prop::array::uniform3(-1.0f64..1.0)) {
            let v = Vec3::new(d[0], d[1], d[2]);
            prop_assume!(v.norm() > 1e-3);
            let r = frame_from_direction(&v);
            prop_assert!(r.orthogonality_error() < 1e-12);
            prop_assert!((r.det() - 1.0).abs() < 1e-12);
            prop_assert!((r.column(2) - v.normalize()).norm() < 1e-12);
        }
    }
}
