//! Points, pixels and rigid-body transforms.
//!
//! Poses are stored as a rotation matrix plus translation. Tangent-space
//! coordinates use the ordering `[ω, v]`: three rotational components
//! followed by three translational ones. Optimizers update poses on the left,
//! `T ← exp(δ)·T`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in 3D, meters.
pub type Point3 = Vector3<f64>;

/// Continuous image coordinates, pixels. Integer coordinates are pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Tangent-space coordinates of SE(3): `[ω_x, ω_y, ω_z, v_x, v_y, v_z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&translation);
        Twist(v)
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Twist(Vector6::from_column_slice(values))
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} is within {tolerance} of π; the logarithm is near-singular")]
    NearSingularLog { angle: f64, tolerance: f64 },
    #[error("rotation matrix is not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
}

/// Angles closer than this to π are rejected by [`PoseSE3::log`].
pub const LOG_SINGULARITY_TOLERANCE: f64 = 1e-9;

/// A rigid-body transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Coefficients `(sin θ/θ, (1−cos θ)/θ², (θ−sin θ)/θ³)` with series fallbacks
/// near zero.
fn exp_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-4 {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose without checking the rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 within `1e-9`.
    pub fn try_new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self::new(rotation, translation);
        let dev = pose.orthonormality_error();
        if dev > 1e-9 {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        Ok(pose)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Maximum of `‖RᵀR − I‖_max` and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.amax().max((self.rotation.determinant() - 1.0).abs())
    }

    /// Exponential map from the tangent space.
    pub fn exp(xi: &Twist) -> Self {
        let w = xi.rotation();
        let v = xi.translation();
        let theta = w.norm();
        let (a, b, c) = exp_coefficients(theta);
        let k = skew(&w);
        let k2 = k * k;
        let rotation = Matrix3::identity() + k * a + k2 * b;
        let left_jacobian = Matrix3::identity() + k * b + k2 * c;
        Self::new(rotation, left_jacobian * v)
    }

    /// Logarithm map, inverse of [`PoseSE3::exp`] for rotation angles below π.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let r = &self.rotation;
        let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        if (std::f64::consts::PI - theta).abs() < LOG_SINGULARITY_TOLERANCE {
            return Err(GeometryError::NearSingularLog {
                angle: theta,
                tolerance: LOG_SINGULARITY_TOLERANCE,
            });
        }
        let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let w = if theta < 1e-4 {
            // sin θ/θ ≈ 1 − θ²/6
            vee * (0.5 / (1.0 - theta * theta / 6.0))
        } else if theta < 3.0 {
            vee * (theta / (2.0 * theta.sin()))
        } else {
            // The skew part vanishes near π; recover the axis from the
            // symmetric part and take the sign from the skew part.
            let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
            let denom = 1.0 - cos_theta;
            let diag = Vector3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]) / denom;
            let i = diag.imax();
            let mut axis = sym.column(i) / denom;
            axis /= axis.norm();
            if axis.dot(&vee) < 0.0 {
                axis = -axis;
            }
            axis * theta
        };
        let (a, b, _) = exp_coefficients(theta);
        let k = skew(&w);
        let inv_left_jacobian = if theta < 1e-4 {
            Matrix3::identity() - k * 0.5 + k * k * (1.0 / 12.0)
        } else {
            Matrix3::identity() - k * 0.5 + k * k * ((1.0 - a / (2.0 * b)) / (theta * theta))
        };
        Ok(Twist::new(w, inv_left_jacobian * self.translation))
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3::new(rt, -(rt * self.translation))
    }

    /// Left-multiplicative tangent update `exp(δ)·self`.
    pub fn retract(&self, delta: &Twist) -> PoseSE3 {
        PoseSE3::exp(delta).compose(self)
    }

    /// Projects the rotation back onto SO(3) by polar decomposition.
    pub fn orthonormalized(&self) -> PoseSE3 {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut rotation = u * v_t;
        if rotation.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            rotation = u * v_t;
        }
        PoseSE3::new(rotation, self.translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle of `self⁻¹·other`, radians.
    pub fn rotation_angle_to(&self, other: &PoseSE3) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

/// JSON form: `{"rotation": [[r00,r01,r02],[r10,..],[r20,..]], "translation": [x,y,z]}`.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for PoseSE3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseSE3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let r = repr.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        PoseSE3::try_new(rotation, Vector3::from(repr.translation)).map_err(serde::de::Error::custom)
    }
}

/// Rotation about a unit axis by `angle` radians.
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    PoseSE3::exp(&Twist::new(axis.normalize() * angle, Vector3::zeros())).rotation
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn twist_matrix(xi: &Twist) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&xi.rotation()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.translation());
        m
    }

    /// Matrix exponential by truncated power series, with scaling and squaring.
    fn expm_series(a: &Matrix4<f64>) -> Matrix4<f64> {
        let norm = a.abs().row_sum().amax();
        let squarings = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let scaled = a / 2f64.powi(squarings as i32);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..30 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Twist::new(axis * angle, t)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        PoseSE3::exp(&random_twist(rng, 3.0))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(PoseSE3::exp(&Twist::zero()), PoseSE3::identity());
    }

    #[test]
    fn exp_of_pi_about_x() {
        let pose = PoseSE3::exp(&Twist::from_slice(&[PI, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        assert!((pose.rotation - expected).amax() < 1e-15);
        assert_eq!(pose.translation, Vector3::zeros());
    }

    #[test]
    fn exp_matches_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let xi = random_twist(&mut rng, PI);
            let oracle = expm_series(&twist_matrix(&xi));
            assert!((PoseSE3::exp(&xi).to_homogeneous() - oracle).amax() < 1e-10);
        }
    }

    #[test]
    fn exp_small_angles_stable() {
        for &angle in &[1e-12, 1e-9, 1e-8, 1e-6, 1e-5] {
            let xi = Twist::from_slice(&[angle, -angle, 0.5 * angle, 0.1, 0.2, 0.3]);
            let oracle = expm_series(&twist_matrix(&xi));
            let pose = PoseSE3::exp(&xi);
            assert!((pose.to_homogeneous() - oracle).amax() < 1e-14);
            let back = pose.log().unwrap();
            assert!((back.0 - xi.0).amax() < 1e-14);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(PoseSE3::identity().log().unwrap().0, Vector6::zeros());
    }

    #[test]
    fn log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, PI - 0.1);
            let back = PoseSE3::exp(&xi).log().unwrap();
            assert!((back.0 - xi.0).amax() < 1e-9, "{xi:?} -> {back:?}");
        }
    }

    #[test]
    fn log_near_pi_branch() {
        let xi = Twist::from_slice(&[
            0.0,
            (PI - 1e-3) / 2f64.sqrt(),
            (PI - 1e-3) / 2f64.sqrt(),
            0.3,
            -0.1,
            0.2,
        ]);
        let back = PoseSE3::exp(&xi).log().unwrap();
        assert!((back.0 - xi.0).amax() < 1e-9);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn log_quarter_turn_about_z() {
        // Reference values from scipy.linalg.logm of the homogeneous matrix.
        let pose = PoseSE3::new(rotation_about(&Vector3::z(), PI / 2.0), Vector3::new(1.0, 0.0, 0.0));
        let xi = pose.log().unwrap();
        let expected = [
            0.0,
            0.0,
            1.5707963267948966,
            0.7853981633974478,
            -0.7853981633974478,
            0.0,
        ];
        for (a, b) in xi.0.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let oracle = expm_series(&twist_matrix(&xi));
        assert!((oracle - pose.to_homogeneous()).amax() < 1e-12);
    }

    #[test]
    fn log_rejects_half_turn() {
        let pose = PoseSE3::exp(&Twist::from_slice(&[0.0, PI, 0.0, 0.0, 0.0, 0.0]));
        assert!(matches!(pose.log(), Err(GeometryError::NearSingularLog { .. })));
    }

    #[test]
    fn transform_point_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(PoseSE3::identity().transform_point(&p), p);
        let t = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(t.transform_point(&Point3::zeros()), Point3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn transform_compose_inverse_match_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let p = Point3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let hp = a.to_homogeneous() * p.push(1.0);
            assert!((a.transform_point(&p) - hp.xyz()).amax() < 1e-12);
            let hab = a.to_homogeneous() * b.to_homogeneous();
            assert!((a.compose(&b).to_homogeneous() - hab).amax() < 1e-12);
            let hinv = a.to_homogeneous().try_inverse().unwrap();
            assert!((a.inverse().to_homogeneous() - hinv).amax() < 1e-12);
            let id = a.compose(&a.inverse());
            assert!((id.to_homogeneous() - Matrix4::identity()).amax() < 1e-10);
        }
        let b = random_pose(&mut rng);
        assert_eq!(PoseSE3::identity().compose(&b), b);
        assert_eq!(PoseSE3::identity().inverse(), PoseSE3::identity());
    }

    #[test]
    fn orthonormalize_repairs_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pose = random_pose(&mut rng);
        pose.rotation[(0, 1)] += 1e-6;
        assert!(pose.orthonormality_error() > 1e-7);
        let fixed = pose.orthonormalized();
        assert!(fixed.orthonormality_error() < 1e-12);
        assert!((fixed.rotation - pose.rotation).amax() < 1e-6);
    }

    #[test]
    fn pose_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng);
        let text = serde_json::to_string(&pose).unwrap();
        let back: PoseSE3 = serde_json::from_str(&text).unwrap();
        assert_eq!(back, pose);
        let bad = r#"{"rotation":[[2,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<PoseSE3>(bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_pose() -> impl Strategy<Value = PoseSE3> {
            prop::array::uniform6(-2.0f64..2.0).prop_map(|a| PoseSE3::exp(&Twist::from_slice(&a)))
        }

        fn arb_point() -> impl Strategy<Value = Point3> {
            prop::array::uniform3(-10.0f64..10.0).prop_map(Point3::from)
        }

        proptest! {
            #[test]
            fn preserves_distances(t in arb_pose(), p in arb_point(), q in arb_point()) {
                let d0 = (p - q).norm();
                let d1 = (t.transform_point(&p) - t.transform_point(&q)).norm();
                prop_assert!((d0 - d1).abs() < 1e-10);
            }

            #[test]
            fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
                let lhs = a.compose(&b).compose(&c).to_homogeneous();
                let rhs = a.compose(&b.compose(&c)).to_homogeneous();
                prop_assert!((lhs - rhs).amax() < 1e-10);
            }
        }
    }
}
