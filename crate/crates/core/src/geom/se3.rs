//! Rigid transforms in SE(3) with exponential/logarithm maps.
//!
//! Tangent vectors are ordered `(ω, v)`: three rotational components
//! followed by three translational ones. `exp` is the standard closed form
//! `R = exp([ω]×)`, `t = V(ω)·v`.

use std::fmt;

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};

/// Number of compositions after which a pose is projected back onto SO(3).
const RENORMALIZE_AFTER: u32 = 1000;

const SMALL_ANGLE: f64 = 1e-10;

/// Tangent-space vector of SE(3): rotation first, then translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&translation);
        Twist(v)
    }

    pub fn from_slice(values: &[f64; 6]) -> Self {
        Twist(Vector6::from_column_slice(values))
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist(self.0 * s)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Rigid transform `x ↦ R·x + t`.
///
/// `Pose` values are named by the frames they connect: a pose called
/// `cam_to_world` maps camera coordinates into world coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    chain: u32,
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion();
        let t = self.translation;
        write!(
            f,
            "Pose(t: [{:.4}, {:.4}, {:.4}], q: [{:.4}, {:.4}, {:.4}, {:.4}])",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            chain: 0,
        }
    }

    /// Builds a pose from a rotation matrix, which is assumed orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
            chain: 0,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose::new(Matrix3::identity(), translation)
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose::new(q.to_rotation_matrix().into_inner(), translation)
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let n = axis.norm();
        if n < SMALL_ANGLE {
            return Pose::from_translation(translation);
        }
        Pose::new(so3_exp(&(axis * (angle / n))), translation)
    }

    /// Camera pose (camera-to-world) at `eye` looking at `target`, with the
    /// camera's `-y` axis as close as possible to `up`. Camera axes follow the
    /// usual vision convention: `x` right, `y` down, `z` forward.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Pose::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            chain: self.chain,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let pose = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            chain: self.chain.max(other.chain) + 1,
        };
        if pose.chain > RENORMALIZE_AFTER {
            pose.renormalized()
        } else {
            pose
        }
    }

    /// Projects the rotation back onto SO(3) (nearest orthonormal matrix).
    pub fn renormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Pose::new(r, self.translation)
    }

    pub fn exp(xi: &Twist) -> Pose {
        se3_exp(xi)
    }

    pub fn log(&self) -> Twist {
        se3_log(self)
    }

    /// Largest deviation of `RᵀR` from identity, plus `|det R − 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.abs().max() + (self.rotation.determinant() - 1.0).abs()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Adjoint matrix acting on `(ω, v)` twists: `Ad_T · ξ = (T ξ^ T⁻¹)^∨`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        let r = self.rotation;
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * r));
        ad
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-8 {
        return 0.5 * vee;
    }
    if std::f64::consts::PI - theta < 1e-4 {
        // Near π the antisymmetric part vanishes; recover the axis from R + I.
        let b = (r + Matrix3::identity()) * 0.5;
        let mut axis = Vector3::new(
            b[(0, 0)].max(0.0).sqrt(),
            b[(1, 1)].max(0.0).sqrt(),
            b[(2, 2)].max(0.0).sqrt(),
        );
        let i = axis.imax();
        for j in 0..3 {
            if j != i {
                axis[j] = b[(i, j)] / axis[i];
            }
        }
        let axis = axis.normalize();
        let axis = if axis.dot(&vee) < 0.0 { -axis } else { axis };
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// `V(ω)` from the SE(3) exponential: `t = V·v`.
fn left_jacobian_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let t2 = theta * theta;
    let b = (1.0 - theta.cos()) / t2;
    let c = (theta - theta.sin()) / (t2 * theta);
    Matrix3::identity() + b * k + c * k * k
}

fn left_jacobian_so3_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-6 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let half = 0.5 * theta;
    let coeff = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
    Matrix3::identity() - 0.5 * k + coeff * k * k
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let w = xi.rotation();
    let v = xi.translation();
    Pose::new(so3_exp(&w), left_jacobian_so3(&w) * v)
}

pub fn se3_log(pose: &Pose) -> Twist {
    let w = so3_log(&pose.rotation);
    let v = left_jacobian_so3_inv(&w) * pose.translation;
    Twist::new(w, v)
}

/// `Y ⊖ X = Log(X⁻¹·Y)`: the error of `y` expressed in the tangent space at `x`.
pub fn ominus(y: &Pose, x: &Pose) -> Twist {
    se3_log(&x.inverse().compose(y))
}
