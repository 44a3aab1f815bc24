//! Manifold primitives and the camera projection chain.
//!
//! Conventions:
//! - `RigidTransform` maps LiDAR-frame points into the camera frame, `p_c = R p_l + t`.
//! - Increments are applied on the left: `T ⊞ δ = Exp(δ) · T`, where `Exp(δ)` has
//!   rotation `exp(⌊δθ×⌋)` and translation `δt` (no left Jacobian on the translation).
//! - Twist component order is `(δθ, δt)`.
//! - Euler angles are intrinsic ZYX: `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x2, Matrix4, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum camera-frame depth accepted by the projection functions.
pub const Z_MIN: f64 = 0.1;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential of a rotation vector.
pub fn so3_exp(delta_theta: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = delta_theta.norm_squared();
    let k = skew(delta_theta);
    let (a, b) = if theta2 < 1e-10 {
        // Taylor terms of sin(θ)/θ and (1 - cos θ)/θ².
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_exp`] for rotation angles in `[0, π)`.
pub fn so3_log(rotation: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let w = Vector3::new(
        rotation[(2, 1)] - rotation[(1, 2)],
        rotation[(0, 2)] - rotation[(2, 0)],
        rotation[(1, 0)] - rotation[(0, 1)],
    );
    if theta < 1e-7 {
        return w * 0.5;
    }
    if theta > std::f64::consts::PI - 1e-6 {
        // Near π the antisymmetric part vanishes; recover the axis from R + I.
        let m = (rotation + Matrix3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&a, &b| m[(a, a)].total_cmp(&m[(b, b)]))
            .unwrap_or(0);
        let axis = m.column(col).normalize();
        return axis * theta;
    }
    w * (theta / (2.0 * theta.sin()))
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation from intrinsic ZYX Euler angles `(yaw, pitch, roll)` in radians.
pub fn euler_zyx_to_rotation(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    rot_z(yaw) * rot_y(pitch) * rot_x(roll)
}

/// Intrinsic ZYX Euler angles `(yaw, pitch, roll)` in radians.
pub fn rotation_to_euler_zyx(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    if r[(2, 0)].abs() > 1.0 - 1e-12 {
        // Gimbal lock: fold everything into yaw.
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return Vector3::new(yaw, pitch, 0.0);
    }
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    Vector3::new(yaw, pitch, roll)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwistIncrement {
    pub delta_theta: Vector3<f64>,
    pub delta_t: Vector3<f64>,
}

impl TwistIncrement {
    pub fn zero() -> Self {
        Self {
            delta_theta: Vector3::zeros(),
            delta_t: Vector3::zeros(),
        }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            delta_theta: Vector3::new(v[0], v[1], v[2]),
            delta_t: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.delta_theta.x,
            self.delta_theta.y,
            self.delta_theta.z,
            self.delta_t.x,
            self.delta_t.y,
            self.delta_t.z,
        )
    }

    /// Convergence measure `‖δθ‖ + ‖δt‖`.
    pub fn norm(&self) -> f64 {
        self.delta_theta.norm() + self.delta_t.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor; rejects matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if ortho.amax() > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("translation is not finite".into()));
        }
        Ok(())
    }

    /// Builds a transform from ZYX Euler angles in degrees and a translation in meters.
    pub fn from_euler_zyx_degrees(ypr_deg: [f64; 3], translation: [f64; 3]) -> Self {
        let [y, p, r] = ypr_deg.map(f64::to_radians);
        Self {
            rotation: euler_zyx_to_rotation(y, p, r),
            translation: Vector3::from(translation),
        }
    }

    pub fn euler_zyx_degrees(&self) -> [f64; 3] {
        let e = rotation_to_euler_zyx(&self.rotation);
        [e.x.to_degrees(), e.y.to_degrees(), e.z.to_degrees()]
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// The increment `δ` with `target = Exp(δ) · self`.
    pub fn left_difference(&self, target: &RigidTransform) -> TwistIncrement {
        let dr = target.rotation * self.rotation.transpose();
        TwistIncrement {
            delta_theta: so3_log(&dr),
            delta_t: target.translation - dr * self.translation,
        }
    }

    /// Rotation angle (radians) and translation distance (meters) between two transforms.
    pub fn distance_to(&self, other: &RigidTransform) -> (f64, f64) {
        let d = self.left_difference(other);
        (
            d.delta_theta.norm(),
            (self.translation - other.translation).norm(),
        )
    }
}

/// `T ⊞ δT = Exp(δT) · T`.
pub fn se3_boxplus(t: &RigidTransform, dt: &TwistIncrement) -> RigidTransform {
    let r = so3_exp(&dt.delta_theta);
    RigidTransform {
        rotation: r * t.rotation,
        translation: r * t.translation + dt.delta_t,
    }
}

/// A unit direction on the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BearingVector(Vector3<f64>);

impl BearingVector {
    /// Normalizes `v`; `v` must be finite and non-zero.
    pub fn new_normalize(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidParameter("bearing must be non-zero".into()));
        }
        Ok(Self(v / n))
    }

    pub fn omega(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Orthonormal basis `[N₁ N₂]` of the tangent plane at `omega`.
///
/// Starts from the coordinate axis least aligned with `omega` (first axis on ties)
/// and applies Gram-Schmidt; `N₂ = ω × N₁`.
pub fn tangent_basis(omega: &BearingVector) -> Matrix3x2<f64> {
    let w = omega.omega();
    let mut axis = 0;
    for i in 1..3 {
        if w[i].abs() < w[axis].abs() {
            axis = i;
        }
    }
    let mut e = Vector3::zeros();
    e[axis] = 1.0;
    let n1 = (e - w * w.dot(&e)).normalize();
    let n2 = w.cross(&n1);
    Matrix3x2::from_columns(&[n1, n2])
}

/// `ω ⊞ δ = exp(⌊N(ω) δ ×⌋) ω`.
pub fn s2_boxplus(omega: &BearingVector, delta: &Vector2<f64>) -> BearingVector {
    let axis = tangent_basis(omega) * delta;
    let v = so3_exp(&axis) * omega.omega();
    BearingVector(v.normalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Distortion-free camera.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
            && [self.k1, self.k2, self.k3, self.p1, self.p2]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "intrinsics violate fx,fy > 0 and 0 < c < size: {self:?}"
            )))
        }
    }

    pub fn has_distortion(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
            .iter()
            .any(|&v| v != 0.0)
    }

    pub fn in_frame(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

fn check_depth(p: &Vector3<f64>) -> Result<()> {
    if p.z > Z_MIN {
        Ok(())
    } else {
        Err(Error::BehindCamera { z: p.z })
    }
}

/// Undistorted pinhole projection `π(P)` in pixels.
pub fn project_pinhole(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    check_depth(p)?;
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Brown-Conrady distortion of normalized image coordinates.
pub fn distort_normalized(xn: &Vector2<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    let (x, y) = (xn.x, xn.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + r2 * (k.k1 + r2 * (k.k2 + r2 * k.k3));
    Vector2::new(
        x * radial + 2.0 * k.p1 * x * y + k.p2 * (r2 + 2.0 * x * x),
        y * radial + k.p1 * (r2 + 2.0 * y * y) + 2.0 * k.p2 * x * y,
    )
}

/// Jacobian of [`distort_normalized`] with respect to the normalized point.
pub fn distort_normalized_jacobian(xn: &Vector2<f64>, k: &CameraIntrinsics) -> Matrix2<f64> {
    let (x, y) = (xn.x, xn.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + r2 * (k.k1 + r2 * (k.k2 + r2 * k.k3));
    // d(radial)/d(r2)
    let dradial = k.k1 + r2 * (2.0 * k.k2 + 3.0 * r2 * k.k3);
    let dxx = radial + 2.0 * x * x * dradial + 2.0 * k.p1 * y + 6.0 * k.p2 * x;
    let dxy = 2.0 * x * y * dradial + 2.0 * k.p1 * x + 2.0 * k.p2 * y;
    let dyx = 2.0 * x * y * dradial + 2.0 * k.p1 * x + 2.0 * k.p2 * y;
    let dyy = radial + 2.0 * y * y * dradial + 6.0 * k.p1 * y + 2.0 * k.p2 * x;
    Matrix2::new(dxx, dxy, dyx, dyy)
}

/// Distortion `f(p)` applied to an undistorted pinhole pixel.
///
/// Distortion acts in normalized coordinates; the result is `p + F·(d(x) − x)` so that
/// zero coefficients return `p` bit-for-bit.
pub fn apply_distortion(p: &Vector2<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    if !k.has_distortion() {
        return *p;
    }
    let xn = Vector2::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy);
    let d = distort_normalized(&xn, k) - xn;
    Vector2::new(p.x + k.fx * d.x, p.y + k.fy * d.y)
}

/// `∂f/∂p` of [`apply_distortion`] in pixel coordinates.
pub fn distortion_jacobian(p: &Vector2<f64>, k: &CameraIntrinsics) -> Matrix2<f64> {
    if !k.has_distortion() {
        return Matrix2::identity();
    }
    let xn = Vector2::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy);
    let j = distort_normalized_jacobian(&xn, k);
    let f = Matrix2::new(k.fx, 0.0, 0.0, k.fy);
    let finv = Matrix2::new(1.0 / k.fx, 0.0, 0.0, 1.0 / k.fy);
    f * j * finv
}

/// `∂π/∂P` of the undistorted pinhole projection.
pub fn projection_jacobian(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Matrix2x3<f64>> {
    check_depth(p)?;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Ok(Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    ))
}

/// Full projection `f(π(P))` of a camera-frame point.
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    Ok(apply_distortion(&project_pinhole(p, k)?, k))
}

/// Projection and its full Jacobian `∂f/∂p · ∂π/∂P`.
pub fn project_with_jacobian(
    p: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
    let pin = project_pinhole(p, k)?;
    let jp = projection_jacobian(p, k)?;
    let jd = distortion_jacobian(&pin, k);
    Ok((apply_distortion(&pin, k), jd * jp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn so3_exp_identity_and_quarter_turn() {
        assert_eq!(so3_exp(&Vector3::zeros()), Matrix3::identity());
        let r = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert!((r * Vector3::x() - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn so3_exp_matches_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let w = random_unit(&mut rng) * 0.3;
            let k = skew(&w);
            let mut term = Matrix3::identity();
            let mut sum = Matrix3::identity();
            for n in 1..20 {
                term = term * k / n as f64;
                sum += term;
            }
            assert!((so3_exp(&w) - sum).amax() < 1e-12);
        }
    }

    #[test]
    fn so3_exp_inverse_and_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let w = random_unit(&mut rng) * rng.random_range(0.0..FRAC_PI_2);
            let p = so3_exp(&w) * so3_exp(&-w);
            assert!((p - Matrix3::identity()).amax() < 1e-10);
            assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-9);
        }
    }

    #[test]
    fn boxplus_zero_and_pure_translation() {
        let t = RigidTransform::from_euler_zyx_degrees([10.0, -20.0, 30.0], [0.1, 0.2, 0.3]);
        assert_eq!(se3_boxplus(&t, &TwistIncrement::zero()), t);
        let d = TwistIncrement::from_vector(&Vector6::new(0.0, 0.0, 0.0, 0.1, 0.0, 0.0));
        let moved = se3_boxplus(&RigidTransform::identity(), &d);
        assert_eq!(moved.rotation, Matrix3::identity());
        assert_eq!(moved.translation, Vector3::new(0.1, 0.0, 0.0));
    }

    #[test]
    fn boxplus_matches_homogeneous_product() {
        let nominal = RigidTransform::from_euler_zyx_degrees([0.0, -90.0, 90.0], [0.0; 3]);
        let d = TwistIncrement::from_vector(&Vector6::new(0.01, -0.02, 0.005, 0.03, -0.01, 0.02));
        let mut exp = Matrix4::identity();
        exp.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&so3_exp(&d.delta_theta));
        exp.fixed_view_mut::<3, 1>(0, 3).copy_from(&d.delta_t);
        let oracle = exp * nominal.to_homogeneous();
        let got = se3_boxplus(&nominal, &d).to_homogeneous();
        assert!((oracle - got).amax() < 1e-12);
    }

    #[test]
    fn boxplus_left_increment_convention() {
        let t = RigidTransform::from_euler_zyx_degrees([5.0, 3.0, -2.0], [0.2, -0.1, 0.05]);
        let a = TwistIncrement::from_vector(&Vector6::new(0.1, 0.0, 0.2, 0.0, 0.3, 0.0));
        let b = TwistIncrement::from_vector(&Vector6::new(-0.05, 0.1, 0.0, 0.1, 0.0, -0.2));
        let ea = se3_boxplus(&RigidTransform::identity(), &a);
        let eb = se3_boxplus(&RigidTransform::identity(), &b);
        let expected = eb.compose(&ea).compose(&t);
        let got = se3_boxplus(&se3_boxplus(&t, &a), &b);
        assert!((expected.to_homogeneous() - got.to_homogeneous()).amax() < 1e-12);
    }

    #[test]
    fn left_difference_round_trip() {
        let a = RigidTransform::from_euler_zyx_degrees([5.0, 3.0, -2.0], [0.2, -0.1, 0.05]);
        let b = RigidTransform::from_euler_zyx_degrees([4.0, 3.5, -1.0], [0.25, -0.1, 0.0]);
        let d = a.left_difference(&b);
        let back = se3_boxplus(&a, &d);
        assert!((back.to_homogeneous() - b.to_homogeneous()).amax() < 1e-12);
    }

    #[test]
    fn nominal_extrinsic_maps_forward_axis() {
        let t = RigidTransform::from_euler_zyx_degrees([0.0, -90.0, 90.0], [0.0; 3]);
        assert!((t.apply(&Vector3::x()) - Vector3::z()).norm() < 1e-15);
        assert!((t.apply(&Vector3::z()) + Vector3::y()).norm() < 1e-15);
        let e = t.euler_zyx_degrees();
        let back = RigidTransform::from_euler_zyx_degrees(e, [0.0; 3]);
        assert!((back.rotation - t.rotation).amax() < 1e-12);
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let ypr = [
                rng.random_range(-170.0..170.0),
                rng.random_range(-85.0..85.0),
                rng.random_range(-170.0..170.0),
            ];
            let t = RigidTransform::from_euler_zyx_degrees(ypr, [0.0; 3]);
            let e = t.euler_zyx_degrees();
            for i in 0..3 {
                assert!((e[i] - ypr[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_rotation_rejected() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        assert!(RigidTransform::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn tangent_basis_properties() {
        let b = tangent_basis(&BearingVector::new_normalize(Vector3::z()).unwrap());
        assert_eq!(b.column(0), Vector3::x());
        assert_eq!(b.column(1), Vector3::y());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let w = BearingVector::new_normalize(random_unit(&mut rng)).unwrap();
            let n = tangent_basis(&w);
            assert!((n.transpose() * w.omega()).amax() < 1e-12);
            assert!((n.transpose() * n - Matrix2::identity()).amax() < 1e-12);
            assert_eq!(n, tangent_basis(&w));
        }
    }

    #[test]
    fn s2_boxplus_geodesic() {
        let z = BearingVector::new_normalize(Vector3::z()).unwrap();
        assert_eq!(s2_boxplus(&z, &Vector2::zeros()).omega(), z.omega());
        for theta in [0.01, 0.3, 1.2] {
            let r = s2_boxplus(&z, &Vector2::new(theta, 0.0));
            let angle = r.omega().dot(z.omega()).clamp(-1.0, 1.0).acos();
            assert!((angle - theta).abs() < 1e-12);
            // Rotation about N₁ moves ω toward −N₂.
            assert!(r.omega().y < 0.0 && r.omega().x.abs() < 1e-15);
        }
    }

    #[test]
    fn s2_boxplus_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let w = BearingVector::new_normalize(random_unit(&mut rng)).unwrap();
            let d = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            assert!((s2_boxplus(&w, &d).omega().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pinhole_examples() {
        let k = k640();
        assert_eq!(
            project_pinhole(&Vector3::new(0.0, 0.0, 1.0), &k).unwrap(),
            Vector2::new(320.0, 240.0)
        );
        assert_eq!(
            project_pinhole(&Vector3::new(1.0, 0.0, 2.0), &k).unwrap(),
            Vector2::new(570.0, 240.0)
        );
        assert!(matches!(
            project_pinhole(&Vector3::new(0.0, 0.0, -1.0), &k),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project_pinhole(&Vector3::new(0.0, 0.0, 0.05), &k).is_err());
    }

    #[test]
    fn distortion_examples() {
        let mut k = k640();
        let p = project_pinhole(&Vector3::new(0.3, -0.2, 1.5), &k).unwrap();
        assert_eq!(apply_distortion(&p, &k), p);
        k.k1 = -0.1;
        let c = Vector2::new(k.cx, k.cy);
        assert_eq!(apply_distortion(&c, &k), c);
        // xn = (0.2, 0): x'' = 0.2 (1 - 0.1 * 0.04) = 0.1992 → u = 500·0.1992 + 320
        let pin = Vector2::new(500.0 * 0.2 + 320.0, 240.0);
        let d = apply_distortion(&pin, &k);
        assert!((d.x - 419.6).abs() < 1e-9);
        assert!((d.y - 240.0).abs() < 1e-12);
    }

    fn distorted_k() -> CameraIntrinsics {
        CameraIntrinsics {
            k1: -0.12,
            k2: 0.05,
            k3: -0.01,
            p1: 0.001,
            p2: -0.0015,
            ..CameraIntrinsics::pinhole(610.0, 605.0, 318.0, 243.0, 640, 480)
        }
    }

    #[test]
    fn projection_jacobian_examples() {
        let k = k640();
        let j = projection_jacobian(&Vector3::new(0.0, 0.0, 2.0), &k).unwrap();
        assert_eq!(j, Matrix2x3::new(250.0, 0.0, 0.0, 0.0, 250.0, 0.0));
        let p = Vector3::new(0.4, -0.3, 2.5);
        let j1 = projection_jacobian(&p, &k).unwrap();
        let j2 = projection_jacobian(&(p * 2.0), &k).unwrap();
        assert!((j1 * 0.5 - j2).amax() < 1e-12);
    }

    #[test]
    fn full_chain_jacobian_matches_finite_differences() {
        let k = distorted_k();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..500 {
            let p = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..6.0),
            );
            let (_, j) = project_with_jacobian(&p, &k).unwrap();
            for c in 0..3 {
                let mut dp = Vector3::zeros();
                dp[c] = h;
                let fd = (project(&(p + dp), &k).unwrap() - project(&(p - dp), &k).unwrap())
                    / (2.0 * h);
                let err = (fd - j.column(c)).norm();
                assert!(err <= 1e-5 * j.column(c).norm().max(1.0), "{err}");
            }
        }
    }

    #[test]
    fn pinhole_jacobian_matches_finite_differences() {
        let k = k640();
        let p = Vector3::new(0.7, 0.2, 3.0);
        let j = projection_jacobian(&p, &k).unwrap();
        let h = 1e-6;
        for c in 0..3 {
            let mut dp = Vector3::zeros();
            dp[c] = h;
            let fd = (project_pinhole(&(p + dp), &k).unwrap()
                - project_pinhole(&(p - dp), &k).unwrap())
                / (2.0 * h);
            assert!((fd - j.column(c)).norm() < 1e-5 * j.column(c).norm().max(1.0));
        }
        // Homogeneous-coordinate oracle for the pose chain.
        let t = RigidTransform::from_euler_zyx_degrees([1.0, -89.0, 91.0], [0.05, -0.02, 0.1]);
        let pl = Vector3::new(3.0, 0.5, -0.2);
        let h4 = t.to_homogeneous() * Vector4::new(pl.x, pl.y, pl.z, 1.0);
        let uv = project_pinhole(&t.apply(&pl), &k).unwrap();
        assert!((uv.x - (500.0 * h4.x / h4.z + 320.0)).abs() < 1e-9);
        assert!((uv.y - (500.0 * h4.y / h4.z + 240.0)).abs() < 1e-9);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(k640().validate().is_ok());
        let mut k = k640();
        k.fx = -1.0;
        assert!(k.validate().is_err());
        let mut k = k640();
        k.cx = 700.0;
        assert!(k.validate().is_err());
    }
}
