//! View synthesis and what is built on it: photometric self-calibration with
//! known depth and poses, rectification to a pinhole camera, point clouds,
//! and a synthetic scene generator that provides ground truth for all of it.
//!
//! A target pixel `p` with ray-length depth `d` is warped into a context view
//! by `p̂ = π(R·φ(p, d) + t)`, where `(R, t)` maps target-camera coordinates
//! to context-camera coordinates.

mod image;
mod scene;

use nalgebra::DVector;
use thiserror::Error;

use crate::camera::{CameraError, CameraModel, ModelKind};
use crate::geometry::{Pixel, PoseSE3};
use crate::optim::{gd_solve, GdSchedule, GradientObjective, OptimError, ParameterBlock, SolveTrace};
use crate::raster::{Grid, Mask};

pub use image::{DepthMap, Image, PointCloud, BORDER_TOLERANCE};
pub use scene::{generate_scene, Scene, SceneSpec, Texture, MIN_TEXTURED_FRACTION};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("no valid pixels to compare")]
    EmptyMask,
    #[error("only {valid} of {total} pixels are valid when warping view {target} into view {context} (20% required)")]
    TooFewValid {
        target: usize,
        context: usize,
        valid: usize,
        total: usize,
    },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("{0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl SynthError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SynthError::EmptyMask | SynthError::TooFewValid { .. } | SynthError::Optim(_)
        )
    }
}

/// One rendered frame: intensities, ray-length depth and the world-to-camera
/// pose.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub depth: DepthMap,
    pub pose: PoseSE3,
}

/// Continuous source coordinates for every target pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub coords: Grid<Pixel>,
    pub mask: Mask,
}

fn check_size(model: &CameraModel, width: usize, height: usize, what: &str) -> Result<(), SynthError> {
    if (model.width as usize, model.height as usize) != (width, height) {
        return Err(SynthError::SizeMismatch(format!(
            "{what} is {width}x{height} but the camera is {}x{}",
            model.width, model.height
        )));
    }
    Ok(())
}

/// Warps every target pixel with a depth into the context view. The mask is
/// false where unprojection or projection fails or where the result would
/// need clamping to sample.
pub fn warp_pixels(model: &CameraModel, depth_t: &DepthMap, t_to_c: &PoseSE3) -> Result<WarpField, SynthError> {
    check_size(model, depth_t.width(), depth_t.height(), "depth map")?;
    let (w, h) = (depth_t.width(), depth_t.height());
    let mut mask = Mask::filled(w, h, false);
    let coords = Grid::from_fn(w, h, |x, y| {
        let warped = depth_t.get(x, y).and_then(|d| {
            let p = model.unproject(&Pixel::new(x as f64, y as f64), d).ok()?;
            model.project(&t_to_c.transform_point(&p)).ok()
        });
        match warped {
            Some(q) if image::samplable(w, h, q.u, q.v) => {
                mask.set(x, y, true);
                q
            }
            _ => Pixel::new(f64::NAN, f64::NAN),
        }
    });
    Ok(WarpField { coords, mask })
}

/// Samples `source` at the warped coordinates; masked pixels are zero.
pub fn synthesize_view(source: &Image, warp: &WarpField) -> Result<Image, SynthError> {
    let (w, h) = (warp.coords.width(), warp.coords.height());
    if (source.width(), source.height()) != (w, h) {
        return Err(SynthError::SizeMismatch(format!(
            "source {}x{} vs warp {w}x{h}",
            source.width(),
            source.height()
        )));
    }
    let mut out = Image::new(w, h, source.channels())?;
    for y in 0..h {
        for x in 0..w {
            if !*warp.mask.get(x, y) {
                continue;
            }
            let q = warp.coords.get(x, y);
            for c in 0..source.channels() {
                if let Some(v) = source.sample(q.u, q.v, c) {
                    out.set(x, y, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Mean absolute intensity difference over the masked pixels and all
/// channels.
pub fn photometric_loss(a: &Image, b: &Image, mask: &Mask) -> Result<f64, SynthError> {
    if !a.same_shape(b) || (mask.width(), mask.height()) != (a.width(), a.height()) {
        return Err(SynthError::SizeMismatch("images and mask must agree".into()));
    }
    let valid = mask.count();
    if valid == 0 {
        return Err(SynthError::EmptyMask);
    }
    let ch = a.channels();
    let mut sum = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..ch {
                sum += (a.as_slice()[i * ch + c] - b.as_slice()[i * ch + c]).abs();
            }
        }
    }
    Ok(sum / (valid * ch) as f64)
}

/// Pixel-valued parameters are stepped in units of the larger image side;
/// distortion parameters in their own units.
pub fn intrinsics_step_scale(model: &CameraModel) -> DVector<f64> {
    let side = f64::from(model.width.max(model.height));
    DVector::from_iterator(
        model.kind.param_count(),
        (0..model.kind.param_count()).map(|i| if i < 4 { side } else { 1.0 }),
    )
}

/// Minimum share of target pixels that must warp into each context view.
pub const MIN_VALID_FRACTION: f64 = 0.2;

/// Summed photometric loss over ordered pairs of consecutive views (both
/// directions), as a function of the intrinsics only.
pub struct PhotometricObjective<'a> {
    views: &'a [View],
    template: CameraModel,
    pairs: Vec<(usize, usize)>,
    frozen_masks: Option<Vec<Mask>>,
}

impl<'a> PhotometricObjective<'a> {
    pub fn new(views: &'a [View], template: CameraModel) -> Result<Self, SynthError> {
        if views.len() < 2 {
            return Err(SynthError::InvalidScene(format!(
                "{} views, at least 2 required",
                views.len()
            )));
        }
        for v in views {
            check_size(&template, v.image.width(), v.image.height(), "image")?;
            check_size(&template, v.depth.width(), v.depth.height(), "depth map")?;
            if v.image.channels() != views[0].image.channels() {
                return Err(SynthError::InvalidImage("views mix gray and color images".into()));
            }
        }
        let pairs = (0..views.len() - 1).flat_map(|i| [(i, i + 1), (i + 1, i)]).collect();
        Ok(Self {
            views,
            template,
            pairs,
            frozen_masks: None,
        })
    }

    /// (target, context) view indices, in summation order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Fixes each pair's valid-pixel set to the one of `model`, which makes
    /// the loss differentiable everywhere the sampling is.
    pub fn freeze_masks(&mut self, model: &CameraModel) -> Result<(), SynthError> {
        let masks = self
            .pairs
            .iter()
            .map(|&(t, c)| warp_pixels(model, &self.views[t].depth, &self.relative_pose(t, c)).map(|w| w.mask))
            .collect::<Result<_, _>>()?;
        self.frozen_masks = Some(masks);
        Ok(())
    }

    fn relative_pose(&self, target: usize, context: usize) -> PoseSE3 {
        self.views[context].pose.compose(&self.views[target].pose.inverse())
    }

    /// Total loss and its gradient with respect to `model.params()`.
    pub fn evaluate_model(&self, model: &CameraModel, with_gradient: bool) -> Result<(f64, DVector<f64>), SynthError> {
        let k = model.kind.param_count();
        let mut total = 0.0;
        let mut grad = DVector::zeros(k);
        for (pair_index, &(t, c)) in self.pairs.iter().enumerate() {
            let target = &self.views[t];
            let context = &self.views[c].image;
            let pose = self.relative_pose(t, c);
            let rotation = pose.rotation;
            let (w, h) = (target.image.width(), target.image.height());
            let channels = target.image.channels();
            let frozen = self.frozen_masks.as_ref().map(|m| &m[pair_index]);
            let mut valid = 0usize;
            let mut sum = 0.0;
            let mut pair_grad = DVector::zeros(k);
            for y in 0..h {
                for x in 0..w {
                    if frozen.is_some_and(|m| !*m.get(x, y)) {
                        continue;
                    }
                    let Some(d) = target.depth.get(x, y) else { continue };
                    let pixel = Pixel::new(x as f64, y as f64);
                    let sample = if with_gradient {
                        model.unproject_with_jacobian(&pixel, d).ok().and_then(|(p, dp)| {
                            let q = pose.transform_point(&p);
                            let (uv, jac) = model.project_with_jacobians(&q).ok()?;
                            context.contains(uv.u, uv.v).then(|| {
                                let d_uv = &jac.d_intrinsics + jac.d_point * rotation * dp;
                                (uv, Some(d_uv))
                            })
                        })
                    } else {
                        model.unproject(&pixel, d).ok().and_then(|p| {
                            let uv = model.project(&pose.transform_point(&p)).ok()?;
                            context.contains(uv.u, uv.v).then_some((uv, None))
                        })
                    };
                    if frozen.is_some() {
                        // The frozen set fixes the normalization.
                        valid += 1;
                    }
                    let Some((uv, d_uv)) = sample else { continue };
                    if frozen.is_none() {
                        valid += 1;
                    }
                    for ch in 0..channels {
                        let (value, gu, gv) = context.sample_with_gradient(uv.u, uv.v, ch).expect("inside image");
                        let r = value - target.image.get(x, y, ch);
                        sum += r.abs();
                        if let Some(d_uv) = &d_uv {
                            let s = if r > 0.0 {
                                1.0
                            } else if r < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            for j in 0..k {
                                pair_grad[j] += s * (gu * d_uv[(0, j)] + gv * d_uv[(1, j)]);
                            }
                        }
                    }
                }
            }
            let total_pixels = w * h;
            if (valid as f64) < MIN_VALID_FRACTION * total_pixels as f64 {
                return Err(SynthError::TooFewValid {
                    target: t,
                    context: c,
                    valid,
                    total: total_pixels,
                });
            }
            let norm = (valid * channels) as f64;
            total += sum / norm;
            grad += pair_grad / norm;
        }
        if !total.is_finite() {
            return Err(SynthError::Optim(OptimError::NonFiniteLoss { epoch: 0 }));
        }
        Ok((total, grad))
    }

    fn model_from(&self, blocks: &[ParameterBlock]) -> Result<CameraModel, OptimError> {
        let mut model = self.template;
        let params = blocks[0].as_vector().expect("intrinsics block is a vector");
        model
            .set_params(params.as_slice())
            .map_err(|e| OptimError::Invalid(e.to_string()))?;
        Ok(model)
    }
}

impl GradientObjective for PhotometricObjective<'_> {
    fn evaluate(&mut self, blocks: &[ParameterBlock]) -> Result<(f64, Vec<DVector<f64>>), OptimError> {
        let model = self.model_from(blocks)?;
        match self.evaluate_model(&model, true) {
            Ok((loss, grad)) => Ok((loss, vec![grad])),
            Err(SynthError::Optim(e)) => Err(e),
            Err(e) => Err(OptimError::Domain(e.to_string())),
        }
    }

    fn constrain(&self, blocks: &mut [ParameterBlock]) {
        if let Ok(mut model) = self.model_from(blocks) {
            model.clamp_to_domain();
            let (w, h) = (f64::from(model.width), f64::from(model.height));
            model.cx = model.cx.clamp(0.0, w - 1.0);
            model.cy = model.cy.clamp(0.0, h - 1.0);
            if let Some(v) = blocks[0].as_vector_mut() {
                v.copy_from_slice(&model.params());
            }
        }
    }
}

/// Recovers intrinsics of `kind` from the views alone, starting from
/// [`CameraModel::default_init`].
pub fn self_calibrate_photometric(
    views: &[View],
    kind: ModelKind,
    schedule: &GdSchedule,
) -> Result<(CameraModel, SolveTrace), SynthError> {
    let first = views
        .first()
        .ok_or_else(|| SynthError::InvalidScene("no views".into()))?;
    let init = CameraModel::default_init(kind, first.image.width() as u32, first.image.height() as u32);
    self_calibrate_photometric_from(views, &init, schedule)
}

/// As [`self_calibrate_photometric`] from an explicit initial model.
pub fn self_calibrate_photometric_from(
    views: &[View],
    init: &CameraModel,
    schedule: &GdSchedule,
) -> Result<(CameraModel, SolveTrace), SynthError> {
    init.validate()?;
    let mut objective = PhotometricObjective::new(views, *init)?;
    // Surfaces input problems (too little overlap) as such rather than as a
    // failed optimizer step.
    objective.evaluate_model(init, false)?;
    let blocks = vec![
        ParameterBlock::intrinsics("intrinsics", DVector::from_vec(init.params()))
            .with_step_scale(intrinsics_step_scale(init)),
    ];
    let (solved, trace) = gd_solve(&mut objective, schedule, blocks)?;
    let mut model = *init;
    model.set_params(solved[0].as_vector().expect("intrinsics block").as_slice())?;
    Ok((model, trace))
}

/// Pinhole with the source model's focal lengths and principal point.
pub fn default_rectification_target(model: &CameraModel) -> CameraModel {
    CameraModel {
        kind: ModelKind::Pinhole,
        alpha: 0.0,
        beta: 1.0,
        xi: 0.0,
        ..*model
    }
}

/// Resamples `image`, taken with `model`, as seen by `target`. Output pixels
/// whose ray `model` cannot image inside `image` are zero and masked out.
pub fn rectify(model: &CameraModel, target: &CameraModel, image: &Image) -> Result<(Image, Mask), SynthError> {
    if target.kind != ModelKind::Pinhole {
        return Err(SynthError::InvalidScene(format!(
            "rectification target must be Pinhole, got {}",
            target.kind
        )));
    }
    check_size(model, image.width(), image.height(), "image")?;
    target.validate()?;
    let (w, h) = (target.width as usize, target.height as usize);
    let mut out = Image::new(w, h, image.channels())?;
    let mut mask = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let Ok(ray) = target.unproject_ray(&Pixel::new(x as f64, y as f64)) else {
                continue;
            };
            let Ok(src) = model.project(&ray) else { continue };
            if !image.contains(src.u, src.v) {
                continue;
            }
            for c in 0..image.channels() {
                out.set(x, y, c, image.sample(src.u, src.v, c).expect("inside image"));
            }
            mask.set(x, y, true);
        }
    }
    Ok((out, mask))
}

/// Unprojects every pixel with a depth. Pixels outside the model's
/// unprojection domain are skipped.
pub fn depth_to_pointcloud(
    model: &CameraModel,
    depth: &DepthMap,
    color: Option<&Image>,
) -> Result<PointCloud, SynthError> {
    check_size(model, depth.width(), depth.height(), "depth map")?;
    if let Some(img) = color {
        check_size(model, img.width(), img.height(), "color image")?;
    }
    let mut points = Vec::new();
    let mut colors = color.map(|_| Vec::new());
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let Some(d) = depth.get(x, y) else { continue };
            let Ok(p) = model.unproject(&Pixel::new(x as f64, y as f64), d) else {
                continue;
            };
            points.push(p);
            if let (Some(img), Some(colors)) = (color, colors.as_mut()) {
                let to_byte = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
                let rgb = if img.channels() == 3 {
                    [
                        to_byte(img.get(x, y, 0)),
                        to_byte(img.get(x, y, 1)),
                        to_byte(img.get(x, y, 2)),
                    ]
                } else {
                    [to_byte(img.get(x, y, 0)); 3]
                };
                colors.push(rgb);
            }
        }
    }
    Ok(PointCloud { points, colors })
}
