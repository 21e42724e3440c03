//! The unified camera model family.
//!
//! All four kinds share the pinhole core `(fx, fy, cx, cy)` and differ in the
//! projection denominator:
//!
//! | kind    | denominator                                              |
//! |---------|----------------------------------------------------------|
//! | Pinhole | `z`                                                      |
//! | UCM     | `α·d + (1−α)·z`,  `d = ‖P‖`                              |
//! | EUCM    | `α·ρ + (1−α)·z`,  `ρ = √(β(x²+y²) + z²)`                 |
//! | DS      | `α·d₂ + (1−α)·k`, `k = ξ·d₁ + z`, `d₂ = √(x²+y²+k²)`     |
//!
//! and `u = fx·x/den + cx`, `v = fy·y/den + cy`.
//!
//! Unprojection returns a point at Euclidean distance `depth` from the camera
//! center along the pixel's ray, which keeps rays with `z ≤ 0` (wide fisheye
//! and catadioptric fields of view) representable.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pixel, Point3};
use crate::raster::Mask;

/// Minimum admissible projection denominator.
pub const DENOMINATOR_EPS: f64 = 1e-8;

/// Upper bound applied to α for UCM/EUCM after optimizer steps.
pub const ALPHA_MAX_OPEN: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Pinhole,
    #[serde(rename = "UCM")]
    Ucm,
    #[serde(rename = "EUCM")]
    Eucm,
    #[serde(rename = "DS")]
    Ds,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Pinhole, ModelKind::Ucm, ModelKind::Eucm, ModelKind::Ds];

    pub fn param_count(self) -> usize {
        match self {
            ModelKind::Pinhole => 4,
            ModelKind::Ucm => 5,
            ModelKind::Eucm | ModelKind::Ds => 6,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Pinhole => &["fx", "fy", "cx", "cy"],
            ModelKind::Ucm => &["fx", "fy", "cx", "cy", "alpha"],
            ModelKind::Eucm => &["fx", "fy", "cx", "cy", "alpha", "beta"],
            ModelKind::Ds => &["fx", "fy", "cx", "cy", "alpha", "xi"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pinhole => "Pinhole",
            ModelKind::Ucm => "UCM",
            ModelKind::Eucm => "EUCM",
            ModelKind::Ds => "DS",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = CameraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pinhole" => Ok(ModelKind::Pinhole),
            "ucm" => Ok(ModelKind::Ucm),
            "eucm" => Ok(ModelKind::Eucm),
            "ds" | "double_sphere" | "doublesphere" => Ok(ModelKind::Ds),
            _ => Err(CameraError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point ({x}, {y}, {z}) is outside the projection domain")]
    ProjectionDomain { x: f64, y: f64, z: f64 },
    #[error("pixel ({u}, {v}) is outside the unprojection domain")]
    UnprojectionDomain { u: f64, v: f64 },
    #[error("depth must be positive and finite, got {0}")]
    InvalidDepth(f64),
    #[error("invalid camera parameters: {0}")]
    InvalidParameters(String),
    #[error("{kind} expects {expected} parameters, got {got}")]
    ParameterCount {
        kind: ModelKind,
        expected: usize,
        got: usize,
    },
    #[error("unknown camera model kind '{0}'")]
    UnknownKind(String),
}

/// Intrinsics of one camera together with its image size.
///
/// `alpha` is zero for pinhole cameras; `beta` is only meaningful for EUCM and
/// `xi` only for DS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub kind: ModelKind,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub alpha: f64,
    pub beta: f64,
    pub xi: f64,
    pub width: u32,
    pub height: u32,
}

/// Derivatives of a projected pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionJacobians {
    /// 2×3, with respect to the camera-frame point.
    pub d_point: Matrix2x3<f64>,
    /// 2×k, with respect to [`CameraModel::params`].
    pub d_intrinsics: DMatrix<f64>,
}

/// Projection denominator together with its partial derivatives.
struct Denominator {
    value: f64,
    d_point: Vector3<f64>,
    /// Derivatives with respect to the distortion parameters (α, then β or ξ).
    d_dist: [f64; 2],
}

fn alpha_weight(alpha: f64) -> f64 {
    if alpha > 0.5 {
        (1.0 - alpha) / alpha
    } else {
        alpha / (1.0 - alpha)
    }
}

impl CameraModel {
    /// Builds a model from a parameter vector in [`ModelKind::param_names`]
    /// order and validates it.
    pub fn from_params(kind: ModelKind, params: &[f64], width: u32, height: u32) -> Result<Self, CameraError> {
        let mut model = Self {
            kind,
            fx: 0.0,
            fy: 0.0,
            cx: 0.0,
            cy: 0.0,
            alpha: 0.0,
            beta: 1.0,
            xi: 0.0,
            width,
            height,
        };
        model.set_params(params)?;
        model.validate()?;
        Ok(model)
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        Self::from_params(ModelKind::Pinhole, &[fx, fy, cx, cy], width, height)
    }

    /// Image-shape-only initialization: `fx = fy = max(w, h)/2`, centered
    /// principal point, `α = 0.5`, `β = 1`, `ξ = 0`.
    pub fn default_init(kind: ModelKind, width: u32, height: u32) -> Self {
        let f = f64::from(width.max(height)) / 2.0;
        Self {
            kind,
            fx: f,
            fy: f,
            cx: f64::from(width) / 2.0,
            cy: f64::from(height) / 2.0,
            alpha: if kind == ModelKind::Pinhole { 0.0 } else { 0.5 },
            beta: 1.0,
            xi: 0.0,
            width,
            height,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = vec![self.fx, self.fy, self.cx, self.cy];
        match self.kind {
            ModelKind::Pinhole => {}
            ModelKind::Ucm => p.push(self.alpha),
            ModelKind::Eucm => p.extend([self.alpha, self.beta]),
            ModelKind::Ds => p.extend([self.alpha, self.xi]),
        }
        p
    }

    /// Overwrites the parameters without validating them.
    pub fn set_params(&mut self, params: &[f64]) -> Result<(), CameraError> {
        let expected = self.kind.param_count();
        if params.len() != expected {
            return Err(CameraError::ParameterCount {
                kind: self.kind,
                expected,
                got: params.len(),
            });
        }
        self.fx = params[0];
        self.fy = params[1];
        self.cx = params[2];
        self.cy = params[3];
        match self.kind {
            ModelKind::Pinhole => self.alpha = 0.0,
            ModelKind::Ucm => self.alpha = params[4],
            ModelKind::Eucm => {
                self.alpha = params[4];
                self.beta = params[5];
            }
            ModelKind::Ds => {
                self.alpha = params[4];
                self.xi = params[5];
            }
        }
        Ok(())
    }

    /// The same intrinsics interpreted as another kind. Parameters the target
    /// kind lacks are dropped; new ones take neutral values (`β = 1`, `ξ = 0`).
    pub fn with_kind(&self, kind: ModelKind) -> Self {
        Self {
            kind,
            alpha: if kind == ModelKind::Pinhole { 0.0 } else { self.alpha },
            beta: if kind == ModelKind::Eucm { self.beta } else { 1.0 },
            xi: if kind == ModelKind::Ds { self.xi } else { 0.0 },
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |msg: String| Err(CameraError::InvalidParameters(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{} must be positive", self.width, self.height));
        }
        if !self.params().iter().all(|p| p.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return bad(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            ));
        }
        if !(0.0..f64::from(self.width)).contains(&self.cx) || !(0.0..f64::from(self.height)).contains(&self.cy) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            ));
        }
        match self.kind {
            ModelKind::Pinhole => {}
            ModelKind::Ucm | ModelKind::Eucm => {
                if !(0.0..1.0).contains(&self.alpha) {
                    return bad(format!("alpha {} outside [0, 1)", self.alpha));
                }
                if self.kind == ModelKind::Eucm && self.beta <= 0.0 {
                    return bad(format!("beta {} must be positive", self.beta));
                }
            }
            ModelKind::Ds => {
                if !(0.0..=1.0).contains(&self.alpha) {
                    return bad(format!("alpha {} outside [0, 1]", self.alpha));
                }
                if self.xi <= -1.0 || self.xi >= 1.0 {
                    return bad(format!("xi {} outside (-1, 1)", self.xi));
                }
            }
        }
        Ok(())
    }

    /// Pulls the distortion parameters back inside their admissible ranges
    /// after an unconstrained update.
    pub fn clamp_to_domain(&mut self) {
        const MIN_POSITIVE: f64 = 1e-6;
        self.fx = self.fx.max(MIN_POSITIVE);
        self.fy = self.fy.max(MIN_POSITIVE);
        match self.kind {
            ModelKind::Pinhole => self.alpha = 0.0,
            ModelKind::Ucm => self.alpha = self.alpha.clamp(0.0, ALPHA_MAX_OPEN),
            ModelKind::Eucm => {
                self.alpha = self.alpha.clamp(0.0, ALPHA_MAX_OPEN);
                self.beta = self.beta.max(MIN_POSITIVE);
            }
            ModelKind::Ds => {
                self.alpha = self.alpha.clamp(0.0, 1.0);
                self.xi = self.xi.clamp(-ALPHA_MAX_OPEN, ALPHA_MAX_OPEN);
            }
        }
    }

    fn denominator(&self, p: &Point3) -> Option<Denominator> {
        let (x, y, z) = (p.x, p.y, p.z);
        let alpha = self.alpha;
        let den = match self.kind {
            ModelKind::Pinhole => Denominator {
                value: z,
                d_point: Vector3::new(0.0, 0.0, 1.0),
                d_dist: [0.0, 0.0],
            },
            ModelKind::Ucm => {
                let d = p.norm();
                if z <= -alpha_weight(alpha) * d {
                    return None;
                }
                Denominator {
                    value: alpha * d + (1.0 - alpha) * z,
                    d_point: Vector3::new(alpha * x / d, alpha * y / d, alpha * z / d + 1.0 - alpha),
                    d_dist: [d - z, 0.0],
                }
            }
            ModelKind::Eucm => {
                let beta = self.beta;
                let r2 = x * x + y * y;
                let rho = (beta * r2 + z * z).sqrt();
                if z <= -alpha_weight(alpha) * rho {
                    return None;
                }
                Denominator {
                    value: alpha * rho + (1.0 - alpha) * z,
                    d_point: Vector3::new(
                        alpha * beta * x / rho,
                        alpha * beta * y / rho,
                        alpha * z / rho + 1.0 - alpha,
                    ),
                    d_dist: [rho - z, alpha * r2 / (2.0 * rho)],
                }
            }
            ModelKind::Ds => {
                let xi = self.xi;
                let d1 = p.norm();
                let w1 = alpha_weight(alpha);
                let w2 = (w1 + xi) / (2.0 * w1 * xi + xi * xi + 1.0).sqrt();
                if z <= -w2 * d1 {
                    return None;
                }
                let k = xi * d1 + z;
                let d2 = (x * x + y * y + k * k).sqrt();
                let dk = Vector3::new(xi * x / d1, xi * y / d1, xi * z / d1 + 1.0);
                let dd2 = Vector3::new(x + k * dk.x, y + k * dk.y, k * dk.z) / d2;
                Denominator {
                    value: alpha * d2 + (1.0 - alpha) * k,
                    d_point: dd2 * alpha + dk * (1.0 - alpha),
                    d_dist: [d2 - k, alpha * k * d1 / d2 + (1.0 - alpha) * d1],
                }
            }
        };
        (den.value > DENOMINATOR_EPS).then_some(den)
    }

    fn domain_error(p: &Point3) -> CameraError {
        CameraError::ProjectionDomain { x: p.x, y: p.y, z: p.z }
    }

    /// Whether `p` lies inside the projection domain.
    pub fn can_project(&self, p: &Point3) -> bool {
        p.iter().all(|c| c.is_finite()) && self.denominator(p).is_some()
    }

    pub fn project(&self, p: &Point3) -> Result<Pixel, CameraError> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Self::domain_error(p));
        }
        let den = self.denominator(p).ok_or_else(|| Self::domain_error(p))?;
        Ok(Pixel::new(
            self.fx * p.x / den.value + self.cx,
            self.fy * p.y / den.value + self.cy,
        ))
    }

    pub fn project_with_jacobians(&self, p: &Point3) -> Result<(Pixel, ProjectionJacobians), CameraError> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Self::domain_error(p));
        }
        let den = self.denominator(p).ok_or_else(|| Self::domain_error(p))?;
        let inv = 1.0 / den.value;
        let mx = p.x * inv;
        let my = p.y * inv;
        let pixel = Pixel::new(self.fx * mx + self.cx, self.fy * my + self.cy);

        // ∂(x/den)/∂P = e_x/den − x·∇den/den²
        let gx = Vector3::new(inv, 0.0, 0.0) - den.d_point * (mx * inv);
        let gy = Vector3::new(0.0, inv, 0.0) - den.d_point * (my * inv);
        let d_point = Matrix2x3::from_rows(&[(gx * self.fx).transpose(), (gy * self.fy).transpose()]);

        let k = self.kind.param_count();
        let mut d_intrinsics = DMatrix::zeros(2, k);
        d_intrinsics[(0, 0)] = mx;
        d_intrinsics[(1, 1)] = my;
        d_intrinsics[(0, 2)] = 1.0;
        d_intrinsics[(1, 3)] = 1.0;
        for (j, dden) in den.d_dist.iter().enumerate().take(k - 4) {
            d_intrinsics[(0, 4 + j)] = -self.fx * mx * inv * dden;
            d_intrinsics[(1, 4 + j)] = -self.fy * my * inv * dden;
        }
        Ok((pixel, ProjectionJacobians { d_point, d_intrinsics }))
    }

    /// Unit-length ray through pixel `p`.
    pub fn unproject_ray(&self, p: &Pixel) -> Result<Vector3<f64>, CameraError> {
        let fail = || CameraError::UnprojectionDomain { u: p.u, v: p.v };
        if !p.is_finite() {
            return Err(fail());
        }
        let alpha = self.alpha;
        let ray = match self.kind {
            ModelKind::Pinhole => {
                let m = Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0);
                m / m.norm()
            }
            ModelKind::Ucm => {
                let gamma = 1.0 - alpha;
                let mx = (p.u - self.cx) * gamma / self.fx;
                let my = (p.v - self.cy) * gamma / self.fy;
                let r2 = mx * mx + my * my;
                let zeta = alpha / gamma;
                let disc = 1.0 + (1.0 - zeta * zeta) * r2;
                if disc <= 0.0 {
                    return Err(fail());
                }
                let factor = (zeta + disc.sqrt()) / (1.0 + r2);
                Vector3::new(factor * mx, factor * my, factor - zeta)
            }
            ModelKind::Eucm => {
                let beta = self.beta;
                let mx = (p.u - self.cx) / self.fx;
                let my = (p.v - self.cy) / self.fy;
                let r2 = mx * mx + my * my;
                let disc = 1.0 - (2.0 * alpha - 1.0) * beta * r2;
                if disc <= 0.0 {
                    return Err(fail());
                }
                let mz = (1.0 - beta * alpha * alpha * r2) / (alpha * disc.sqrt() + 1.0 - alpha);
                let m = Vector3::new(mx, my, mz);
                m / m.norm()
            }
            ModelKind::Ds => {
                let xi = self.xi;
                let mx = (p.u - self.cx) / self.fx;
                let my = (p.v - self.cy) / self.fy;
                let r2 = mx * mx + my * my;
                let disc = 1.0 - (2.0 * alpha - 1.0) * r2;
                if disc <= 0.0 {
                    return Err(fail());
                }
                let mz = (1.0 - alpha * alpha * r2) / (alpha * disc.sqrt() + 1.0 - alpha);
                let mz2 = mz * mz;
                let disc2 = mz2 + (1.0 - xi * xi) * r2;
                if disc2 < 0.0 {
                    return Err(fail());
                }
                let factor = (mz * xi + disc2.sqrt()) / (mz2 + r2);
                Vector3::new(factor * mx, factor * my, factor * mz - xi)
            }
        };
        // Rays the forward model cannot map back are not part of the field of view.
        if !ray.iter().all(|c| c.is_finite()) || self.denominator(&ray).is_none() {
            return Err(fail());
        }
        Ok(ray)
    }

    /// The point at Euclidean distance `depth` along the ray through `p`.
    pub fn unproject(&self, p: &Pixel, depth: f64) -> Result<Point3, CameraError> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(CameraError::InvalidDepth(depth));
        }
        Ok(self.unproject_ray(p)? * depth)
    }

    /// Unprojects and returns `∂P/∂intrinsics` (3×k).
    ///
    /// The derivative follows from differentiating the two constraints that
    /// define the unprojected point, `π(P, i) = p` and `‖P‖ = depth`, which
    /// gives the 3×3 system `[∂π/∂P; Pᵀ]·∂P/∂i = [−∂π/∂i; 0]`.
    pub fn unproject_with_jacobian(&self, p: &Pixel, depth: f64) -> Result<(Point3, DMatrix<f64>), CameraError> {
        let point = self.unproject(p, depth)?;
        let (_, jac) = self.project_with_jacobians(&point)?;
        let mut a = Matrix3::zeros();
        a.fixed_view_mut::<2, 3>(0, 0).copy_from(&jac.d_point);
        a.row_mut(2).copy_from(&point.transpose());
        let lu = a.lu();
        let k = self.kind.param_count();
        let mut out = DMatrix::zeros(3, k);
        for j in 0..k {
            let rhs = Vector3::new(-jac.d_intrinsics[(0, j)], -jac.d_intrinsics[(1, j)], 0.0);
            let col = lu
                .solve(&rhs)
                .ok_or(CameraError::UnprojectionDomain { u: p.u, v: p.v })?;
            out.set_column(j, &col);
        }
        Ok((point, out))
    }

    /// True at integer pixel coordinates where unprojection succeeds.
    pub fn valid_fov_mask(&self) -> Mask {
        Mask::from_fn(self.width as usize, self.height as usize, |x, y| {
            self.unproject_ray(&Pixel::new(x as f64, y as f64)).is_ok()
        })
    }
}

/// JSON form `{kind, fx, fy, cx, cy, alpha, beta?, xi?, width, height}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraModelRepr {
    kind: ModelKind,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xi: Option<f64>,
    width: u32,
    height: u32,
}

impl Serialize for CameraModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CameraModelRepr {
            kind: self.kind,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            alpha: self.alpha,
            beta: (self.kind == ModelKind::Eucm).then_some(self.beta),
            xi: (self.kind == ModelKind::Ds).then_some(self.xi),
            width: self.width,
            height: self.height,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = CameraModelRepr::deserialize(d)?;
        let model = CameraModel {
            kind: r.kind,
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            alpha: r.alpha,
            beta: match r.kind {
                ModelKind::Eucm => r.beta.ok_or_else(|| D::Error::missing_field("beta"))?,
                _ => 1.0,
            },
            xi: match r.kind {
                ModelKind::Ds => r.xi.ok_or_else(|| D::Error::missing_field("xi"))?,
                _ => 0.0,
            },
            width: r.width,
            height: r.height,
        };
        model.validate().map_err(D::Error::custom)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ucm(fx: f64, fy: f64, cx: f64, cy: f64, alpha: f64) -> CameraModel {
        CameraModel::from_params(ModelKind::Ucm, &[fx, fy, cx, cy, alpha], 384, 256).unwrap()
    }

    #[test]
    fn optical_axis_maps_to_principal_point() {
        let m = CameraModel::from_params(ModelKind::Ucm, &[100.0, 100.0, 50.0, 50.0, 0.6], 100, 100).unwrap();
        let p = m.project(&Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Pixel::new(50.0, 50.0));
    }

    #[test]
    fn ucm_alpha_zero_is_pinhole() {
        let m = CameraModel::from_params(ModelKind::Ucm, &[100.0, 100.0, 50.0, 50.0, 0.0], 200, 100).unwrap();
        let p = m.project(&Point3::new(1.0, 0.0, 1.0)).unwrap();
        assert!((p.u - 150.0).abs() < 1e-12);
    }

    #[test]
    fn ucm_projection_reference_value() {
        // Computed with an independent scalar evaluation of the UCM formula.
        let m = ucm(235.4, 245.1, 186.5, 132.6, 0.650);
        let p = m.project(&Point3::new(1.0, 1.0, 2.0)).unwrap();
        assert!((p.u - 289.19751860305826).abs() < 1e-9);
        assert!((p.v - 239.52931949706698).abs() < 1e-9);
    }

    #[test]
    fn ucm_unprojection_reference_value() {
        let m = ucm(237.6, 247.9, 187.9, 130.3, 0.631);
        let p = m.unproject(&Pixel::new(200.0, 140.0), 2.0).unwrap();
        let expected = [0.10177438357200759, 0.07819783947342043, 1.9958775194761396];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn principal_point_unprojects_onto_axis() {
        for kind in ModelKind::ALL {
            let m = CameraModel::default_init(kind, 320, 240);
            let p = m.unproject(&Pixel::new(m.cx, m.cy), 1.0).unwrap();
            assert!(p.x.abs() < 1e-15 && p.y.abs() < 1e-15);
            assert!((p.z - 1.0).abs() < 1e-12, "{kind}: {p:?}");
        }
    }

    #[test]
    fn pinhole_unprojection_direction() {
        let m = CameraModel::from_params(ModelKind::Ucm, &[100.0, 100.0, 50.0, 50.0, 0.0], 200, 100).unwrap();
        let p = m.unproject(&Pixel::new(150.0, 50.0), 1.0).unwrap();
        let on_plane = p / p.z;
        assert!((on_plane - Vector3::new(1.0, 0.0, 1.0)).amax() < 1e-12);
    }

    #[test]
    fn default_init_examples() {
        let m = CameraModel::default_init(ModelKind::Ucm, 384, 256);
        assert_eq!((m.fx, m.fy, m.cx, m.cy, m.alpha), (192.0, 192.0, 192.0, 128.0, 0.5));
        let m = CameraModel::default_init(ModelKind::Pinhole, 100, 100);
        assert_eq!(m.params(), vec![50.0, 50.0, 50.0, 50.0]);
        let m = CameraModel::default_init(ModelKind::Ds, 640, 480);
        assert_eq!(m.params(), vec![320.0, 320.0, 320.0, 240.0, 0.5, 0.0]);
        let m = CameraModel::default_init(ModelKind::Eucm, 640, 480);
        assert_eq!(m.params(), vec![320.0, 320.0, 320.0, 240.0, 0.5, 1.0]);
    }

    #[test]
    fn jacobian_on_axis() {
        let m = ucm(235.4, 245.1, 186.5, 132.6, 0.65);
        let (_, j) = m.project_with_jacobians(&Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(j.d_intrinsics[(0, 2)], 1.0);
        assert_eq!(j.d_intrinsics[(0, 0)], 0.0);

        let pin = CameraModel::pinhole(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let (_, j) = pin.project_with_jacobians(&Point3::new(0.0, 0.0, 1.0)).unwrap();
        let expected = Matrix2x3::new(100.0, 0.0, 0.0, 0.0, 100.0, 0.0);
        assert_eq!(j.d_point, expected);
    }

    #[test]
    fn projection_rejects_points_outside_domain() {
        let pin = CameraModel::default_init(ModelKind::Pinhole, 100, 100);
        assert!(matches!(
            pin.project(&Point3::new(0.0, 0.0, -1.0)),
            Err(CameraError::ProjectionDomain { .. })
        ));
        assert!(pin.project(&Point3::new(1.0, 0.0, 0.0)).is_err());
        let m = ucm(200.0, 200.0, 190.0, 128.0, 0.65);
        assert!(m.project(&Point3::new(0.0, 0.0, -1.0)).is_err());
        assert!(m.project(&Point3::new(f64::NAN, 0.0, 1.0)).is_err());
    }

    #[test]
    fn unprojection_errors() {
        let m = CameraModel::default_init(ModelKind::Ucm, 100, 100);
        assert_eq!(
            m.unproject(&Pixel::new(50.0, 50.0), 0.0),
            Err(CameraError::InvalidDepth(0.0))
        );
        assert!(m.unproject(&Pixel::new(50.0, 50.0), -1.0).is_err());
        let eucm = CameraModel::from_params(ModelKind::Eucm, &[10.0, 10.0, 50.0, 50.0, 0.9, 1.0], 100, 100).unwrap();
        // r² bound 1/(β(2α−1)) = 1.25: r = 1.1 is inside, r = 1.2·√2 is not.
        assert!(eucm.unproject_ray(&Pixel::new(61.0, 50.0)).is_ok());
        assert!(matches!(
            eucm.unproject_ray(&Pixel::new(62.0, 62.0)),
            Err(CameraError::UnprojectionDomain { .. })
        ));
    }

    #[test]
    fn fov_mask_pinhole_all_true() {
        let m = CameraModel::default_init(ModelKind::Pinhole, 64, 48);
        assert_eq!(m.valid_fov_mask().count(), 64 * 48);
    }

    #[test]
    fn fov_mask_matches_r2_bound() {
        let m = CameraModel::from_params(ModelKind::Eucm, &[20.0, 20.0, 32.0, 32.0, 0.9, 1.0], 64, 64).unwrap();
        let mask = m.valid_fov_mask();
        let bound = 1.0 / (m.beta * (2.0 * m.alpha - 1.0));
        let mut inside = 0;
        for y in 0..64 {
            for x in 0..64 {
                let mx = (x as f64 - m.cx) / m.fx;
                let my = (y as f64 - m.cy) / m.fy;
                let expect = mx * mx + my * my < bound;
                assert_eq!(*mask.get(x, y), expect, "pixel ({x}, {y})");
                inside += expect as usize;
            }
        }
        assert!(inside > 0 && inside < 64 * 64);
    }

    #[test]
    fn fov_mask_agrees_with_exhaustive_unprojection() {
        for kind in ModelKind::ALL {
            let mut m = CameraModel::default_init(kind, 48, 40);
            m.fx = 12.0;
            m.fy = 11.0;
            m.alpha = if kind == ModelKind::Pinhole { 0.0 } else { 0.8 };
            m.xi = if kind == ModelKind::Ds { -0.3 } else { 0.0 };
            let mask = m.valid_fov_mask();
            for y in 0..40 {
                for x in 0..48 {
                    let ok = m.unproject(&Pixel::new(x as f64, y as f64), 1.0).is_ok();
                    assert_eq!(*mask.get(x, y), ok);
                }
            }
        }
    }

    #[test]
    fn validation() {
        assert!(CameraModel::from_params(ModelKind::Ucm, &[100.0, 100.0, 50.0, 50.0, 1.0], 100, 100).is_err());
        assert!(CameraModel::from_params(ModelKind::Ds, &[100.0, 100.0, 50.0, 50.0, 1.0, 0.5], 100, 100).is_ok());
        assert!(CameraModel::from_params(ModelKind::Ds, &[100.0, 100.0, 50.0, 50.0, 0.5, 1.0], 100, 100).is_err());
        assert!(CameraModel::from_params(ModelKind::Eucm, &[100.0, 100.0, 50.0, 50.0, 0.5, 0.0], 100, 100).is_err());
        assert!(CameraModel::from_params(ModelKind::Pinhole, &[-1.0, 100.0, 50.0, 50.0], 100, 100).is_err());
        assert!(CameraModel::from_params(ModelKind::Pinhole, &[1.0, 100.0, 100.0, 50.0], 100, 100).is_err());
        assert!(matches!(
            CameraModel::from_params(ModelKind::Ucm, &[1.0, 1.0, 1.0, 1.0], 10, 10),
            Err(CameraError::ParameterCount {
                expected: 5,
                got: 4,
                ..
            })
        ));
    }

    #[test]
    fn json_field_names() {
        let m =
            CameraModel::from_params(ModelKind::Eucm, &[235.6, 245.4, 186.4, 132.7, 0.597, 1.112], 384, 256).unwrap();
        let v: serde_json::Value = serde_json::to_value(m).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["alpha", "beta", "cx", "cy", "fx", "fy", "height", "kind", "width"]
        );
        assert_eq!(v["kind"], "EUCM");
        let back: CameraModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);

        let ds = r#"{"kind":"DS","fx":181.4,"fy":188.9,"cx":186.4,"cy":132.6,"alpha":0.571,"xi":-0.23,"width":384,"height":256}"#;
        let m: CameraModel = serde_json::from_str(ds).unwrap();
        assert_eq!(m.xi, -0.23);
        let missing =
            r#"{"kind":"DS","fx":181.4,"fy":188.9,"cx":186.4,"cy":132.6,"alpha":0.571,"width":384,"height":256}"#;
        assert!(serde_json::from_str::<CameraModel>(missing).is_err());
        let unknown = r#"{"kind":"UCM","fx":1,"fy":1,"cx":1,"cy":1,"alpha":0.5,"gamma":2,"width":4,"height":4}"#;
        assert!(serde_json::from_str::<CameraModel>(unknown).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("eucm".parse::<ModelKind>().unwrap(), ModelKind::Eucm);
        assert_eq!("DS".parse::<ModelKind>().unwrap(), ModelKind::Ds);
        assert!("kb".parse::<ModelKind>().is_err());
    }
}
