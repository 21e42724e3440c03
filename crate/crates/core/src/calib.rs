//! Target-based calibration.
//!
//! Two protocols share one residual: full calibration (intrinsics and every
//! frame pose) and pose-only refits with fixed intrinsics. The residual of an
//! observation is `project(T_f · P_corner) − p_observed`; poses map board
//! coordinates into the camera frame.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraModel, ModelKind};
use crate::geometry::{rotation_about, skew, Pixel, Point3, PoseSE3};
use crate::optim::{
    lm_solve, BlockJacobian, Evaluation, LmConfig, OptimError, ParameterBlock, ResidualProblem, SolveTrace,
};

/// Frames with fewer observations are left out of a solve.
pub const MIN_OBSERVATIONS_PER_FRAME: usize = 6;
/// A full calibration needs at least this many usable frames.
pub const MIN_FRAMES: usize = 3;

pub const REPORT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("{used} usable frames, at least {required} required")]
    TooFewFrames { used: usize, required: usize },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("no observation could be evaluated")]
    NoObservations,
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON in {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl CalibError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CalibError::Degenerate(_) | CalibError::NoObservations | CalibError::Optim(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub corner_id: usize,
    pub pixel: Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub observations: Vec<Observation>,
}

/// Known board geometry plus per-frame corner detections.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDataset {
    pub board: Vec<Point3>,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRepr {
    id: u64,
    obs: Vec<(usize, f64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRepr {
    board: Vec<[f64; 3]>,
    image_size: [u32; 2],
    frames: Vec<FrameRepr>,
}

impl Serialize for TargetDataset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        DatasetRepr {
            board: self.board.iter().map(|p| [p.x, p.y, p.z]).collect(),
            image_size: [self.width, self.height],
            frames: self
                .frames
                .iter()
                .map(|f| FrameRepr {
                    id: f.id,
                    obs: f
                        .observations
                        .iter()
                        .map(|o| (o.corner_id, o.pixel.u, o.pixel.v))
                        .collect(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TargetDataset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = DatasetRepr::deserialize(d)?;
        let data = TargetDataset {
            board: repr.board.into_iter().map(Vector3::from).collect(),
            width: repr.image_size[0],
            height: repr.image_size[1],
            frames: repr
                .frames
                .into_iter()
                .map(|f| Frame {
                    id: f.id,
                    observations: f
                        .obs
                        .into_iter()
                        .map(|(corner_id, u, v)| Observation {
                            corner_id,
                            pixel: Pixel::new(u, v),
                        })
                        .collect(),
                })
                .collect(),
        };
        data.validate().map_err(serde::de::Error::custom)?;
        Ok(data)
    }
}

impl TargetDataset {
    pub fn validate(&self) -> Result<(), CalibError> {
        let bad = |msg: String| Err(CalibError::InvalidDataset(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{}", self.width, self.height));
        }
        if self.board.is_empty() {
            return bad("empty board".into());
        }
        if !self.board.iter().all(|p| p.iter().all(|x| x.is_finite())) {
            return bad("non-finite board point".into());
        }
        let mut ids = HashSet::new();
        for frame in &self.frames {
            if !ids.insert(frame.id) {
                return bad(format!("duplicate frame id {}", frame.id));
            }
            let mut corners = HashSet::new();
            for o in &frame.observations {
                if o.corner_id >= self.board.len() {
                    return bad(format!(
                        "frame {} observes corner {} but the board has {}",
                        frame.id,
                        o.corner_id,
                        self.board.len()
                    ));
                }
                if !corners.insert(o.corner_id) {
                    return bad(format!("frame {} observes corner {} twice", frame.id, o.corner_id));
                }
                if !o.pixel.is_finite() {
                    return bad(format!("frame {} has a non-finite observation", frame.id));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let text = fs::read_to_string(path).map_err(|source| CalibError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CalibError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        let text = serde_json::to_string(self).expect("dataset serializes");
        fs::write(path, text).map_err(|source| CalibError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn observation_count(&self) -> usize {
        self.frames.iter().map(|f| f.observations.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Full,
    PoseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub frame_id: u64,
    /// Board to camera.
    pub pose: PoseSE3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedObservation {
    pub frame_id: u64,
    pub corner_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame_id: u64,
    pub observations: usize,
    pub mean_error: f64,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub version: String,
    pub mode: CalibrationMode,
    pub model: CameraModel,
    pub poses: Vec<FramePose>,
    /// Mean reprojection error, pixels.
    pub mre: f64,
    pub initial_mre: f64,
    pub observations: usize,
    /// Observations dropped because they could not be evaluated at
    /// initialization.
    pub excluded: Vec<ExcludedObservation>,
    /// Frames left out for having too few usable observations.
    pub excluded_frames: Vec<u64>,
    pub frame_stats: Vec<FrameStats>,
    pub trace: SolveTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub frame_id: u64,
    pub corner_id: usize,
    pub du: f64,
    pub dv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MreSummary {
    pub mre: f64,
    pub count: usize,
    /// Observations that could not be evaluated (no pose for the frame, or
    /// outside the projection domain).
    pub excluded: usize,
}

/// Order-independent sum: the terms are sorted first.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Per-observation residuals for every frame that has a pose.
pub fn residuals(data: &TargetDataset, model: &CameraModel, poses: &[FramePose]) -> (Vec<ResidualRow>, usize) {
    let by_id: BTreeMap<u64, &PoseSE3> = poses.iter().map(|p| (p.frame_id, &p.pose)).collect();
    let mut rows = Vec::new();
    let mut excluded = 0;
    for frame in &data.frames {
        let Some(pose) = by_id.get(&frame.id) else {
            excluded += frame.observations.len();
            continue;
        };
        for o in &frame.observations {
            let q = pose.transform_point(&data.board[o.corner_id]);
            match model.project(&q) {
                Ok(p) => rows.push(ResidualRow {
                    frame_id: frame.id,
                    corner_id: o.corner_id,
                    du: p.u - o.pixel.u,
                    dv: p.v - o.pixel.v,
                }),
                Err(_) => excluded += 1,
            }
        }
    }
    (rows, excluded)
}

/// Mean Euclidean reprojection error over every observation that can be
/// evaluated; the rest are counted in [`MreSummary::excluded`].
pub fn mean_reprojection_error(
    data: &TargetDataset,
    model: &CameraModel,
    poses: &[FramePose],
) -> Result<MreSummary, CalibError> {
    let (rows, excluded) = residuals(data, model, poses);
    if rows.is_empty() {
        return Err(CalibError::NoObservations);
    }
    let count = rows.len();
    let total = stable_sum(rows.iter().map(|r| r.du.hypot(r.dv)).collect());
    Ok(MreSummary {
        mre: total / count as f64,
        count,
        excluded,
    })
}

/// One frame's usable observations, resolved against the board.
#[derive(Debug, Clone)]
struct FrameData {
    id: u64,
    corner_ids: Vec<usize>,
    points: Vec<Point3>,
    pixels: Vec<Pixel>,
}

impl FrameData {
    fn retain(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.corner_ids.retain(|_| (keep[i], i += 1).0);
        i = 0;
        self.points.retain(|_| (keep[i], i += 1).0);
        i = 0;
        self.pixels.retain(|_| (keep[i], i += 1).0);
    }
}

/// Reprojection residuals over `[intrinsics, pose_0, pose_1, ...]`.
struct TargetProblem<'a> {
    frames: &'a [FrameData],
    template: CameraModel,
}

impl TargetProblem<'_> {
    fn model(&self, blocks: &[ParameterBlock]) -> Result<CameraModel, OptimError> {
        let mut model = self.template;
        let params = blocks[0].as_vector().expect("intrinsics block is a vector");
        model
            .set_params(params.as_slice())
            .map_err(|e| OptimError::Invalid(e.to_string()))?;
        Ok(model)
    }
}

impl ResidualProblem for TargetProblem<'_> {
    fn evaluate(&self, blocks: &[ParameterBlock], with_jacobians: bool) -> Result<Evaluation, OptimError> {
        let model = self.model(blocks)?;
        let k = model.kind.param_count();
        let rows: usize = self.frames.iter().map(|f| 2 * f.points.len()).sum();
        let want_intrinsics = with_jacobians && !blocks[0].frozen;
        let mut r = DVector::zeros(rows);
        let mut j_intr = DMatrix::zeros(if want_intrinsics { rows } else { 0 }, k);
        let mut jacobians = Vec::with_capacity(blocks.len());
        jacobians.push(None);
        let mut row = 0;
        for (f, frame) in self.frames.iter().enumerate() {
            let block = &blocks[f + 1];
            let pose = block.as_pose().expect("frame block is a pose");
            let want_pose = with_jacobians && !block.frozen;
            let start = row;
            let mut j_pose = DMatrix::zeros(if want_pose { 2 * frame.points.len() } else { 0 }, 6);
            for (i, (b, obs)) in frame.points.iter().zip(&frame.pixels).enumerate() {
                let q = pose.transform_point(b);
                let domain = |e: CameraError| OptimError::Domain(format!("frame {}: {e}", frame.id));
                if with_jacobians {
                    let (p, jac) = model.project_with_jacobians(&q).map_err(domain)?;
                    r[row] = p.u - obs.u;
                    r[row + 1] = p.v - obs.v;
                    if want_intrinsics {
                        j_intr.view_mut((row, 0), (2, k)).copy_from(&jac.d_intrinsics);
                    }
                    if want_pose {
                        j_pose
                            .fixed_view_mut::<2, 3>(2 * i, 0)
                            .copy_from(&(jac.d_point * -skew(&q)));
                        j_pose.fixed_view_mut::<2, 3>(2 * i, 3).copy_from(&jac.d_point);
                    }
                } else {
                    let p = model.project(&q).map_err(domain)?;
                    r[row] = p.u - obs.u;
                    r[row + 1] = p.v - obs.v;
                }
                row += 2;
            }
            jacobians.push(want_pose.then_some(BlockJacobian {
                row_start: start,
                values: j_pose,
            }));
        }
        if want_intrinsics {
            jacobians[0] = Some(BlockJacobian {
                row_start: 0,
                values: j_intr,
            });
        }
        Ok(Evaluation {
            residuals: r,
            jacobians,
        })
    }

    fn constrain(&self, blocks: &mut [ParameterBlock]) {
        if blocks[0].frozen {
            return;
        }
        if let Ok(mut model) = self.model(blocks) {
            model.clamp_to_domain();
            let clamped = model.params();
            if let Some(v) = blocks[0].as_vector_mut() {
                v.copy_from_slice(&clamped);
            }
        }
    }
}

/// Least-squares similarity `dst ≈ s·R·src + t` (Umeyama). With
/// `allow_scale = false` this is the orthogonal Procrustes solution.
fn similarity(src: &[Point3], dst: &[Point3], allow_scale: bool) -> (Matrix3<f64>, Vector3<f64>, f64) {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
        var_s += (s - mu_s).norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        signs.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = if allow_scale && var_s > 0.0 {
        svd.singular_values.component_mul(&signs).sum() / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * rotation * mu_s;
    (rotation, translation, scale)
}

const ORTHOGONAL_MAX_ITERATIONS: usize = 1000;

/// Board-to-camera pose from unit bearing vectors by orthogonal iteration,
/// seeded by a similarity fit to the bearings themselves.
fn pose_from_bearings(points: &[Point3], rays: &[Vector3<f64>]) -> PoseSE3 {
    let (r0, t0, s0) = similarity(points, rays, true);
    let s0 = if s0 > 1e-12 { s0 } else { 1.0 };
    let mut rotation = r0;
    let mut translation = t0 / s0;
    let mut targets = vec![Vector3::zeros(); points.len()];
    for _ in 0..ORTHOGONAL_MAX_ITERATIONS {
        for ((b, ray), target) in points.iter().zip(rays).zip(targets.iter_mut()) {
            let q = rotation * b + translation;
            *target = ray * ray.dot(&q).max(1e-6);
        }
        let (r, t, _) = similarity(points, &targets, false);
        let change = (r - rotation).amax() + (t - translation).amax() / translation.norm().max(1e-12);
        rotation = r;
        translation = t;
        if change < 1e-13 {
            break;
        }
    }
    PoseSE3::new(rotation, translation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    pub lm: LmConfig,
    /// LM iterations on each frame's pose alone during the bootstrap.
    pub bootstrap_iters: usize,
    /// Initial LM iterations with the intrinsics frozen.
    pub warm_start_iters: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            bootstrap_iters: 10,
            warm_start_iters: 0,
        }
    }
}

struct Prepared {
    frames: Vec<FrameData>,
    poses: Vec<PoseSE3>,
    excluded: Vec<ExcludedObservation>,
    excluded_frames: Vec<u64>,
}

/// Resolves observations, bootstraps a pose per frame with `model` and drops
/// whatever cannot be evaluated.
fn prepare(data: &TargetDataset, model: &CameraModel, options: &CalibrationOptions) -> Result<Prepared, CalibError> {
    data.validate()?;
    if (model.width, model.height) != (data.width, data.height) {
        return Err(CalibError::InvalidDataset(format!(
            "model is {}x{} but the dataset is {}x{}",
            model.width, model.height, data.width, data.height
        )));
    }
    let mut out = Prepared {
        frames: Vec::new(),
        poses: Vec::new(),
        excluded: Vec::new(),
        excluded_frames: Vec::new(),
    };
    for frame in &data.frames {
        let mut fd = FrameData {
            id: frame.id,
            corner_ids: Vec::new(),
            points: Vec::new(),
            pixels: Vec::new(),
        };
        let mut rays = Vec::new();
        for o in &frame.observations {
            match model.unproject_ray(&o.pixel) {
                Ok(ray) => {
                    fd.corner_ids.push(o.corner_id);
                    fd.points.push(data.board[o.corner_id]);
                    fd.pixels.push(o.pixel);
                    rays.push(ray);
                }
                Err(_) => out.excluded.push(ExcludedObservation {
                    frame_id: frame.id,
                    corner_id: o.corner_id,
                }),
            }
        }
        if fd.points.len() < MIN_OBSERVATIONS_PER_FRAME {
            out.excluded_frames.push(frame.id);
            continue;
        }
        let mut pose = pose_from_bearings(&fd.points, &rays);

        let keep: Vec<bool> = fd
            .points
            .iter()
            .map(|b| model.can_project(&pose.transform_point(b)))
            .collect();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.excluded.push(ExcludedObservation {
                    frame_id: frame.id,
                    corner_id: fd.corner_ids[i],
                });
            }
        }
        fd.retain(&keep);
        if fd.points.len() < MIN_OBSERVATIONS_PER_FRAME {
            out.excluded_frames.push(frame.id);
            continue;
        }

        if options.bootstrap_iters > 0 {
            let single = std::slice::from_ref(&fd);
            let problem = TargetProblem {
                frames: single,
                template: *model,
            };
            let blocks = vec![
                ParameterBlock::intrinsics("intrinsics", DVector::from_vec(model.params())).frozen(true),
                ParameterBlock::pose("pose", pose),
            ];
            let config = LmConfig {
                max_iters: options.bootstrap_iters,
                ..options.lm
            };
            let (solved, _) = lm_solve(&problem, blocks, &config)?;
            pose = *solved[1].as_pose().expect("pose block");
        }
        out.frames.push(fd);
        out.poses.push(pose);
    }
    Ok(out)
}

fn check_not_degenerate(poses: &[PoseSE3]) -> Result<(), CalibError> {
    let first = &poses[0];
    let scale = first.translation.norm().max(1.0);
    let all_same = poses
        .iter()
        .all(|p| first.rotation_angle_to(p) < 1e-6 && (p.translation - first.translation).norm() < 1e-6 * scale);
    if all_same {
        return Err(CalibError::Degenerate(
            "every frame views the board from the same pose; intrinsics are not observable".into(),
        ));
    }
    Ok(())
}

fn frame_stats(rows: &[ResidualRow]) -> Vec<FrameStats> {
    let mut by_frame: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_frame.entry(r.frame_id).or_default().push(r.du.hypot(r.dv));
    }
    by_frame
        .into_iter()
        .map(|(frame_id, errors)| FrameStats {
            frame_id,
            observations: errors.len(),
            max_error: errors.iter().copied().fold(0.0, f64::max),
            mean_error: stable_sum(errors.clone()) / errors.len() as f64,
        })
        .collect()
}

fn solve(
    data: &TargetDataset,
    init: CameraModel,
    mode: CalibrationMode,
    options: &CalibrationOptions,
) -> Result<CalibrationReport, CalibError> {
    init.validate()?;
    let prepared = prepare(data, &init, options)?;
    let required = match mode {
        CalibrationMode::Full => MIN_FRAMES,
        CalibrationMode::PoseOnly => 1,
    };
    if prepared.frames.len() < required {
        return Err(CalibError::TooFewFrames {
            used: prepared.frames.len(),
            required,
        });
    }
    if mode == CalibrationMode::Full {
        check_not_degenerate(&prepared.poses)?;
    }

    let problem = TargetProblem {
        frames: &prepared.frames,
        template: init,
    };
    let mut blocks = vec![
        ParameterBlock::intrinsics("intrinsics", DVector::from_vec(init.params()))
            .frozen(mode == CalibrationMode::PoseOnly),
    ];
    for (frame, pose) in prepared.frames.iter().zip(&prepared.poses) {
        blocks.push(ParameterBlock::pose(format!("frame{}", frame.id), *pose));
    }
    let frame_poses = |blocks: &[ParameterBlock]| -> Vec<FramePose> {
        prepared
            .frames
            .iter()
            .zip(&blocks[1..])
            .map(|(f, b)| FramePose {
                frame_id: f.id,
                pose: *b.as_pose().expect("pose block"),
            })
            .collect()
    };
    let used = used_dataset(data, &prepared.frames);
    let initial_mre = mean_reprojection_error(&used, &init, &frame_poses(&blocks))?.mre;

    let mut trace: Option<SolveTrace> = None;
    if mode == CalibrationMode::Full && options.warm_start_iters > 0 {
        blocks[0].frozen = true;
        let config = LmConfig {
            max_iters: options.warm_start_iters,
            ..options.lm
        };
        let (solved, warm) = lm_solve(&problem, blocks, &config)?;
        blocks = solved;
        blocks[0].frozen = false;
        trace = Some(warm);
    }
    let (solved, main) = lm_solve(&problem, blocks, &options.lm)?;
    let trace = match trace {
        Some(mut warm) => {
            warm.extend(main);
            warm
        }
        None => main,
    };

    let mut model = init;
    model.set_params(solved[0].as_vector().expect("intrinsics block").as_slice())?;
    model.validate()?;
    let poses = frame_poses(&solved);
    let summary = mean_reprojection_error(&used, &model, &poses)?;
    let (rows, _) = residuals(&used, &model, &poses);
    Ok(CalibrationReport {
        version: REPORT_VERSION.to_string(),
        mode,
        model,
        poses,
        mre: summary.mre,
        initial_mre,
        observations: summary.count,
        excluded: prepared.excluded,
        excluded_frames: prepared.excluded_frames,
        frame_stats: frame_stats(&rows),
        trace,
    })
}

/// The dataset restricted to the observations a solve actually used.
fn used_dataset(data: &TargetDataset, frames: &[FrameData]) -> TargetDataset {
    TargetDataset {
        board: data.board.clone(),
        width: data.width,
        height: data.height,
        frames: frames
            .iter()
            .map(|f| Frame {
                id: f.id,
                observations: f
                    .corner_ids
                    .iter()
                    .zip(&f.pixels)
                    .map(|(&corner_id, &pixel)| Observation { corner_id, pixel })
                    .collect(),
            })
            .collect(),
    }
}

/// Joint refinement of intrinsics and every frame pose. Without `init` the
/// intrinsics start from [`CameraModel::default_init`].
pub fn calibrate(
    data: &TargetDataset,
    kind: ModelKind,
    init: Option<&CameraModel>,
) -> Result<CalibrationReport, CalibError> {
    calibrate_with(data, kind, init, &CalibrationOptions::default())
}

pub fn calibrate_with(
    data: &TargetDataset,
    kind: ModelKind,
    init: Option<&CameraModel>,
    options: &CalibrationOptions,
) -> Result<CalibrationReport, CalibError> {
    let init = match init {
        Some(m) if m.kind == kind => *m,
        Some(m) => m.with_kind(kind),
        None => CameraModel::default_init(kind, data.width, data.height),
    };
    solve(data, init, CalibrationMode::Full, options)
}

/// Pose-only refit with fixed intrinsics.
pub fn refit_poses(data: &TargetDataset, fixed: &CameraModel) -> Result<CalibrationReport, CalibError> {
    refit_poses_with(data, fixed, &CalibrationOptions::default())
}

pub fn refit_poses_with(
    data: &TargetDataset,
    fixed: &CameraModel,
    options: &CalibrationOptions,
) -> Result<CalibrationReport, CalibError> {
    solve(data, *fixed, CalibrationMode::PoseOnly, options)
}

pub const DEFAULT_PERTURBATION_SCALES: [f64; 4] = [1.10, 1.05, 0.95, 0.90];
/// Intrinsics stay frozen for this many LM iterations in perturbation runs.
pub const PERTURBATION_WARM_START: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub scale: f64,
    pub kind: ModelKind,
    pub parameter_names: Vec<String>,
    pub reference: Vec<f64>,
    pub initial: Vec<f64>,
    pub converged: Vec<f64>,
    /// `|converged − reference| / |reference|` per parameter (absolute
    /// difference where the reference is zero).
    pub deviations: Vec<f64>,
    pub mre: f64,
}

#[derive(Debug, Serialize)]
pub struct PerturbationFailure {
    pub scale: f64,
    pub error: String,
    #[serde(skip)]
    pub numerical: bool,
}

pub fn relative_deviation(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        (value - reference).abs()
    } else {
        ((value - reference) / reference).abs()
    }
}

/// Re-calibrates from every intrinsic parameter of `reference` multiplied by
/// each scale, poses re-bootstrapped, intrinsics frozen for the first
/// [`PERTURBATION_WARM_START`] iterations. A scale whose initial model is
/// invalid yields a failure entry; the other scales still run.
pub fn perturb_and_recalibrate(
    data: &TargetDataset,
    reference: &CameraModel,
    scales: &[f64],
) -> Vec<Result<PerturbationResult, PerturbationFailure>> {
    perturb_and_recalibrate_with(data, reference, scales, &perturbation_options())
}

/// Solver settings used by [`perturb_and_recalibrate`].
pub fn perturbation_options() -> CalibrationOptions {
    CalibrationOptions {
        warm_start_iters: PERTURBATION_WARM_START,
        ..CalibrationOptions::default()
    }
}

pub fn perturb_and_recalibrate_with(
    data: &TargetDataset,
    reference: &CameraModel,
    scales: &[f64],
    options: &CalibrationOptions,
) -> Vec<Result<PerturbationResult, PerturbationFailure>> {
    let ref_params = reference.params();
    scales
        .iter()
        .map(|&scale| {
            let fail = |e: CalibError| PerturbationFailure {
                scale,
                numerical: e.is_numerical(),
                error: e.to_string(),
            };
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(fail(CalibError::InvalidDataset(format!(
                    "scale {scale} must be positive"
                ))));
            }
            let initial: Vec<f64> = ref_params.iter().map(|p| p * scale).collect();
            let init = CameraModel::from_params(reference.kind, &initial, reference.width, reference.height)
                .map_err(|e| fail(e.into()))?;
            let report = calibrate_with(data, reference.kind, Some(&init), options).map_err(fail)?;
            let converged = report.model.params();
            Ok(PerturbationResult {
                scale,
                kind: reference.kind,
                parameter_names: reference.kind.param_names().iter().map(|s| s.to_string()).collect(),
                deviations: converged
                    .iter()
                    .zip(&ref_params)
                    .map(|(&c, &r)| relative_deviation(c, r))
                    .collect(),
                reference: ref_params.clone(),
                initial,
                converged,
                mre: report.mre,
            })
        })
        .collect()
}

/// Planar grid target and viewpoint distribution for synthetic datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSpec {
    pub cols: usize,
    pub rows: usize,
    /// Corner spacing, meters.
    pub spacing: f64,
    pub frames: usize,
    /// Board-center distance range, meters.
    pub min_distance: f64,
    pub max_distance: f64,
    /// Largest tilt of the board normal away from the viewing ray, radians.
    pub max_tilt: f64,
    /// Standard deviation of the Gaussian pixel noise on each axis.
    pub noise_sigma: f64,
    /// A frame is redrawn until this fraction of the corners is visible.
    pub min_visible_fraction: f64,
    pub seed: u64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            cols: 9,
            rows: 7,
            spacing: 0.05,
            frames: 30,
            min_distance: 0.35,
            max_distance: 0.9,
            max_tilt: 0.7,
            noise_sigma: 0.0,
            min_visible_fraction: 0.6,
            seed: 0,
        }
    }
}

/// Renders a synthetic target dataset with `model`; also returns the
/// generating board-to-camera poses, one per frame.
pub fn generate_target(model: &CameraModel, spec: &TargetSpec) -> Result<(TargetDataset, Vec<PoseSE3>), CalibError> {
    model.validate()?;
    if spec.cols < 2 || spec.rows < 2 || spec.frames == 0 || spec.spacing <= 0.0 {
        return Err(CalibError::InvalidDataset(format!("bad target spec {spec:?}")));
    }
    if !(spec.min_distance > 0.0 && spec.max_distance >= spec.min_distance) || spec.noise_sigma < 0.0 {
        return Err(CalibError::InvalidDataset(format!("bad target spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let center = Vector3::new(
        (spec.cols - 1) as f64 * spec.spacing / 2.0,
        (spec.rows - 1) as f64 * spec.spacing / 2.0,
        0.0,
    );
    let board: Vec<Point3> = (0..spec.rows)
        .flat_map(|r| (0..spec.cols).map(move |c| Vector3::new(c as f64, r as f64, 0.0)))
        .map(|p| p * spec.spacing)
        .collect();
    let (w, h) = (f64::from(model.width), f64::from(model.height));
    let needed = ((board.len() as f64) * spec.min_visible_fraction).ceil() as usize;
    let needed = needed.max(MIN_OBSERVATIONS_PER_FRAME);

    let mut frames = Vec::with_capacity(spec.frames);
    let mut poses = Vec::with_capacity(spec.frames);
    const MAX_ATTEMPTS: usize = 10_000;
    let mut attempts = 0;
    while frames.len() < spec.frames {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(CalibError::InvalidDataset(
                "could not place the board visibly; check the target spec against the camera".into(),
            ));
        }
        let aim = Pixel::new(rng.random_range(0.1 * w..0.9 * w), rng.random_range(0.1 * h..0.9 * h));
        let Ok(ray) = model.unproject_ray(&aim) else { continue };
        let distance = rng.random_range(spec.min_distance..=spec.max_distance);
        // Board faces the camera (normal along −ray), then tilted and spun.
        let facing = rotation_from_z_to(&ray);
        let spin = rotation_about(&Vector3::z(), rng.random_range(-0.5..0.5));
        let tilt_axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
        let tilt = if tilt_axis.norm() > 1e-6 {
            rotation_about(&tilt_axis, rng.random_range(0.0..spec.max_tilt))
        } else {
            Matrix3::identity()
        };
        let rotation = facing * tilt * spin;
        let pose = PoseSE3::new(rotation, ray * distance - rotation * center);

        let mut observations = Vec::new();
        for (id, b) in board.iter().enumerate() {
            let q = pose.transform_point(b);
            // Corners seen from behind the board are not detectable.
            let normal = rotation * Vector3::z();
            if normal.dot(&q) <= 0.0 {
                continue;
            }
            let Ok(p) = model.project(&q) else { continue };
            let (du, dv) = if spec.noise_sigma > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let p = Pixel::new(p.u + du, p.v + dv);
            if p.u >= 0.0 && p.u <= w - 1.0 && p.v >= 0.0 && p.v <= h - 1.0 {
                observations.push(Observation {
                    corner_id: id,
                    pixel: p,
                });
            }
        }
        if observations.len() < needed {
            continue;
        }
        frames.push(Frame {
            id: frames.len() as u64,
            observations,
        });
        poses.push(pose);
    }
    Ok((
        TargetDataset {
            board,
            width: model.width,
            height: model.height,
            frames,
        },
        poses,
    ))
}

/// A rotation taking `+z` onto `dir`.
fn rotation_from_z_to(dir: &Vector3<f64>) -> Matrix3<f64> {
    let d = dir.normalize();
    let z = Vector3::z();
    let axis = z.cross(&d);
    let s = axis.norm();
    if s < 1e-12 {
        return if d.z > 0.0 {
            Matrix3::identity()
        } else {
            rotation_about(&Vector3::x(), std::f64::consts::PI)
        };
    }
    rotation_about(&axis, s.atan2(z.dot(&d)))
}
