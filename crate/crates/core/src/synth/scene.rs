//! Procedurally textured box rooms rendered through any camera model.
//!
//! The camera always sits inside the room, so every ray hits exactly one
//! wall and nothing is ever occluded.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::geometry::{rotation_about, Pixel, Point3, PoseSE3};

use super::image::{DepthMap, Image};
use super::{SynthError, View};

/// Surface pattern, in wall coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// Sum of 8 random sinusoids along each wall axis, frequencies drawn from
    /// `[min_frequency, max_frequency]` cycles per meter.
    Noise { min_frequency: f64, max_frequency: f64 },
    /// Alternating 0.2 / 0.8 squares.
    Checker { cell: f64 },
    /// Smooth sinusoidal stripes along the first wall axis.
    Stripes { period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Ground-truth camera used for rendering.
    pub camera: CameraModel,
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub texture: Texture,
    pub views: usize,
    /// Rotation between consecutive views, degrees (drawn from half to full).
    pub rotation_deg: f64,
    pub min_translation: f64,
    pub max_translation: f64,
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            camera: CameraModel::from_params(
                crate::camera::ModelKind::Ucm,
                &[150.0, 155.0, 129.5, 126.0, 0.65],
                256,
                256,
            )
            .expect("valid default camera"),
            room_min: [-2.0, -1.5, -2.0],
            room_max: [2.0, 1.5, 3.0],
            texture: Texture::Noise {
                min_frequency: 0.5,
                max_frequency: 3.0,
            },
            views: 5,
            rotation_deg: 8.0,
            min_translation: 0.2,
            max_translation: 0.3,
            supersample: 2,
        }
    }
}

const SINUSOIDS_PER_AXIS: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Sinusoid {
    amplitude: f64,
    frequency: f64,
    phase: f64,
}

/// A textured, occlusion-free box room plus camera trajectory.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SceneSpec,
    /// Per wall, per wall axis.
    waves: Vec<[Vec<Sinusoid>; 2]>,
    poses: Vec<PoseSE3>,
}

/// Index of the wall axes spanning a wall perpendicular to `axis`.
fn wall_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

impl Scene {
    pub fn new(spec: &SceneSpec, seed: u64) -> Result<Self, SynthError> {
        spec.camera.validate()?;
        let bad = |msg: String| Err(SynthError::InvalidScene(msg));
        if (0..3).any(|a| spec.room_max[a].partial_cmp(&spec.room_min[a]) != Some(std::cmp::Ordering::Greater)) {
            return bad(format!("room {:?}..{:?} is empty", spec.room_min, spec.room_max));
        }
        if spec.views == 0 || spec.supersample == 0 {
            return bad("views and supersample must be positive".into());
        }
        if !(spec.min_translation >= 0.0 && spec.max_translation >= spec.min_translation) || spec.rotation_deg < 0.0 {
            return bad("bad motion ranges".into());
        }
        match spec.texture {
            Texture::Noise {
                min_frequency,
                max_frequency,
            } if !(min_frequency > 0.0 && max_frequency >= min_frequency && max_frequency.is_finite()) => {
                return bad(format!("noise band [{min_frequency}, {max_frequency}] has no texture"));
            }
            Texture::Checker { cell } if !(cell > 0.0 && cell.is_finite()) => {
                return bad(format!("checker cell {cell}"));
            }
            Texture::Stripes { period } if !(period > 0.0 && period.is_finite()) => {
                return bad(format!("stripe period {period}"));
            }
            _ => {}
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..6)
            .map(|_| {
                let mut axis = || -> Vec<Sinusoid> {
                    (0..SINUSOIDS_PER_AXIS)
                        .map(|_| {
                            let (lo, hi) = match spec.texture {
                                Texture::Noise {
                                    min_frequency,
                                    max_frequency,
                                } => (min_frequency, max_frequency),
                                _ => (1.0, 1.0),
                            };
                            Sinusoid {
                                amplitude: rng.random_range(0.5..1.0),
                                frequency: if hi > lo { rng.random_range(lo..hi) } else { lo },
                                phase: rng.random_range(0.0..2.0 * PI),
                            }
                        })
                        .collect()
                };
                [axis(), axis()]
            })
            .collect();

        let center = Vector3::from_fn(|a, _| 0.5 * (spec.room_min[a] + spec.room_max[a]));
        let mut poses = Vec::with_capacity(spec.views);
        // Camera-to-world orientation and camera center.
        let mut orientation = nalgebra::Matrix3::identity();
        let mut position = center;
        let margin = 0.25;
        for i in 0..spec.views {
            if i > 0 {
                let mut attempts = 0;
                loop {
                    attempts += 1;
                    if attempts > 1000 {
                        return bad("cannot keep the camera inside the room".into());
                    }
                    let axis = random_unit(&mut rng);
                    let angle = spec.rotation_deg.to_radians() * rng.random_range(0.5..=1.0);
                    let dir = random_unit(&mut rng);
                    let step = if spec.max_translation > spec.min_translation {
                        rng.random_range(spec.min_translation..spec.max_translation)
                    } else {
                        spec.min_translation
                    };
                    let candidate = position + dir * step;
                    if (0..3)
                        .all(|a| candidate[a] > spec.room_min[a] + margin && candidate[a] < spec.room_max[a] - margin)
                    {
                        orientation *= rotation_about(&axis, angle);
                        position = candidate;
                        break;
                    }
                }
            }
            let rotation = orientation.transpose();
            poses.push(PoseSE3::new(rotation, -(rotation * position)));
        }
        let scene = Self {
            spec: *spec,
            waves,
            poses,
        };
        for pose in &scene.poses {
            if !scene.contains(&pose.inverse().translation) {
                return bad("camera outside the room".into());
            }
        }
        Ok(scene)
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// World-to-camera poses of the generated views.
    pub fn poses(&self) -> &[PoseSE3] {
        &self.poses
    }

    fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] > self.spec.room_min[a] && p[a] < self.spec.room_max[a])
    }

    /// First wall hit from inside the room: distance along the unit
    /// direction and wall index (`2·axis + side`).
    pub fn intersect(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for a in 0..3 {
            let (bound, side) = if dir[a] > 0.0 {
                (self.spec.room_max[a], 1)
            } else if dir[a] < 0.0 {
                (self.spec.room_min[a], 0)
            } else {
                continue;
            };
            let t = (bound - origin[a]) / dir[a];
            if t > 0.0 && best.is_none_or(|(b, _)| t < b) {
                best = Some((t, 2 * a + side));
            }
        }
        best
    }

    /// Texture value at a point on wall `wall`.
    pub fn radiance(&self, p: &Point3, wall: usize) -> f64 {
        let (sa, ta) = wall_axes(wall / 2);
        let (s, t) = (p[sa], p[ta]);
        match self.spec.texture {
            Texture::Noise { .. } => {
                let [ws, wt] = &self.waves[wall];
                let mut sum = 0.0;
                let mut norm = 0.0;
                for (w, x) in ws.iter().map(|w| (w, s)).chain(wt.iter().map(|w| (w, t))) {
                    sum += w.amplitude * (2.0 * PI * w.frequency * x + w.phase).sin();
                    norm += w.amplitude;
                }
                0.5 + 0.5 * sum / norm
            }
            Texture::Checker { cell } => {
                let parity = ((s / cell).floor() + (t / cell).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    0.2
                } else {
                    0.8
                }
            }
            Texture::Stripes { period } => 0.5 + 0.4 * (2.0 * PI * s / period).sin(),
        }
    }

    /// Intensity along a world-frame ray, or `None` if it escapes (camera
    /// outside the room).
    fn trace(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let (t, wall) = self.intersect(origin, dir)?;
        Some((t, self.radiance(&(origin + dir * t), wall)))
    }

    /// Renders intensity and ray-length depth through `model` from the
    /// world-to-camera `pose`. Pixels outside the model's field of view are
    /// black with no depth.
    pub fn render(&self, model: &CameraModel, pose: &PoseSE3) -> (Image, DepthMap) {
        let (w, h) = (model.width as usize, model.height as usize);
        let to_world = pose.inverse();
        let origin = to_world.translation;
        let n = self.spec.supersample;
        let mut depth = vec![0.0; w * h];
        let mut intensity = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if let Ok(ray) = model.unproject_ray(&Pixel::new(x as f64, y as f64)) {
                    if let Some((t, _)) = self.trace(&origin, &(to_world.rotation * ray)) {
                        depth[i] = t;
                    }
                }
                let mut sum = 0.0;
                let mut hits = 0;
                for sy in 0..n {
                    for sx in 0..n {
                        let u = x as f64 + (sx as f64 + 0.5) / n as f64 - 0.5;
                        let v = y as f64 + (sy as f64 + 0.5) / n as f64 - 0.5;
                        let Ok(ray) = model.unproject_ray(&Pixel::new(u, v)) else {
                            continue;
                        };
                        if let Some((_, value)) = self.trace(&origin, &(to_world.rotation * ray)) {
                            sum += value;
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    intensity[i] = sum / hits as f64;
                }
            }
        }
        (
            Image::from_vec(w, h, 1, intensity).expect("intensities lie in [0, 1]"),
            DepthMap::from_vec(w, h, depth).expect("size matches"),
        )
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Minimum share of pixels with a rendered surface in every view.
pub const MIN_TEXTURED_FRACTION: f64 = 0.5;

/// Renders every view of the scene described by `spec`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Vec<View>, SynthError> {
    let scene = Scene::new(spec, seed)?;
    scene
        .poses()
        .iter()
        .map(|pose| {
            let (image, depth) = scene.render(&spec.camera, pose);
            let fraction = depth.valid_mask().count() as f64 / (depth.width() * depth.height()) as f64;
            if fraction < MIN_TEXTURED_FRACTION {
                return Err(SynthError::InvalidScene(format!(
                    "only {:.0}% of a view is textured",
                    100.0 * fraction
                )));
            }
            Ok(View {
                image,
                depth,
                pose: *pose,
            })
        })
        .collect()
}
