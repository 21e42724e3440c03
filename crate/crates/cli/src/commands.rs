use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use selfcal::calib::{
    calibrate_with, generate_target, perturb_and_recalibrate_with, refit_poses_with, residuals, CalibrationReport,
    PerturbationFailure, PerturbationResult, TargetDataset, TargetSpec, REPORT_VERSION,
};
use selfcal::optim::SolveTrace;
use selfcal::synth::{
    default_rectification_target, depth_to_pointcloud, generate_scene, rectify, self_calibrate_photometric_from,
    DepthMap, Image, SceneSpec, View,
};
use selfcal::{CameraModel, ModelKind, PoseSE3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{Command, RunConfig};
use crate::error::AppError;

pub fn run(config: &RunConfig) -> Result<(), AppError> {
    config.validate()?;
    match &config.command {
        Command::Calibrate {
            data,
            model,
            init,
            fixed_intrinsics,
            out,
        } => cmd_calibrate(config, data, *model, init.as_deref(), fixed_intrinsics.as_deref(), out),
        Command::Perturb {
            data,
            reference,
            scales,
            out,
        } => cmd_perturb(config, data, reference, scales, out),
        Command::Selfcal {
            scene,
            views,
            model,
            init,
            out,
        } => cmd_selfcal(config, scene.as_deref(), views.as_deref(), *model, init.as_deref(), out),
        Command::Rectify {
            model,
            image,
            target,
            mask,
            out,
        } => cmd_rectify(model, image, target.as_deref(), mask.as_deref(), out),
        Command::Cloud {
            model,
            depth,
            image,
            out,
        } => cmd_cloud(model, depth, image.as_deref(), out),
        Command::GenScene { spec, out } => cmd_gen_scene(config, spec.as_deref(), out),
        Command::GenTarget { model, spec, out } => cmd_gen_target(config, model, spec.as_deref(), out),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), AppError> {
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AppError> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> Result<(), AppError> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn create_parent(file: &Path) -> Result<(), AppError> {
    match file.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => create_dir(dir),
        _ => Ok(()),
    }
}

fn check_kind(expected: Option<ModelKind>, found: &CameraModel, what: &str) -> Result<(), AppError> {
    match expected {
        Some(kind) if kind != found.kind => Err(AppError::Config(format!(
            "--model {kind} does not match the {} model in {what}",
            found.kind
        ))),
        _ => Ok(()),
    }
}

fn residuals_csv(data: &TargetDataset, report: &CalibrationReport) -> String {
    let (rows, _) = residuals(data, &report.model, &report.poses);
    let mut csv = String::from("frame_id,corner_id,du,dv\n");
    for r in rows {
        let _ = writeln!(csv, "{},{},{},{}", r.frame_id, r.corner_id, r.du, r.dv);
    }
    csv
}

fn cmd_calibrate(
    config: &RunConfig,
    data_path: &Path,
    kind: Option<ModelKind>,
    init: Option<&Path>,
    fixed: Option<&Path>,
    out: &Path,
) -> Result<(), AppError> {
    let data = TargetDataset::load(data_path)?;
    let options = config.calib_options();
    let report = if let Some(path) = fixed {
        let model: CameraModel = read_json(path)?;
        check_kind(kind, &model, "--fixed-intrinsics")?;
        refit_poses_with(&data, &model, &options)?
    } else {
        let init: Option<CameraModel> = init.map(read_json).transpose()?;
        let kind = kind
            .or(init.map(|m| m.kind))
            .expect("validated: model kind or init given");
        calibrate_with(&data, kind, init.as_ref(), &options)?
    };
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("model.json"), &report.model)?;
    write_text(&out.join("residuals.csv"), &residuals_csv(&data, &report))?;
    println!(
        "{} ({}): MRE {:.4} px over {} observations, {} frames",
        report.model.kind,
        serde_json::to_value(report.mode)
            .expect("mode serializes")
            .as_str()
            .unwrap_or_default(),
        report.mre,
        report.observations,
        report.poses.len()
    );
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "snake_case")]
enum PerturbationEntry {
    Converged(PerturbationResult),
    Failed(PerturbationFailure),
}

#[derive(Serialize)]
struct PerturbationReport<'a> {
    version: &'static str,
    reference: &'a CameraModel,
    results: &'a [PerturbationEntry],
}

fn cmd_perturb(
    config: &RunConfig,
    data_path: &Path,
    reference: &Path,
    scales: &[f64],
    out: &Path,
) -> Result<(), AppError> {
    let data = TargetDataset::load(data_path)?;
    let reference: CameraModel = read_json(reference)?;
    let entries: Vec<PerturbationEntry> =
        perturb_and_recalibrate_with(&data, &reference, scales, &config.calib_options())
            .into_iter()
            .map(|r| match r {
                Ok(r) => PerturbationEntry::Converged(r),
                Err(f) => PerturbationEntry::Failed(f),
            })
            .collect();

    let names = reference.kind.param_names();
    let mut csv = String::from("scale,status,mre");
    for prefix in ["", "dev_"] {
        for n in names {
            let _ = write!(csv, ",{prefix}{n}");
        }
    }
    csv.push('\n');
    for entry in &entries {
        match entry {
            PerturbationEntry::Converged(r) => {
                let _ = write!(csv, "{},converged,{}", r.scale, r.mre);
                for v in r.converged.iter().chain(&r.deviations) {
                    let _ = write!(csv, ",{v}");
                }
            }
            PerturbationEntry::Failed(f) => {
                let _ = write!(csv, "{},failed,{}", f.scale, ",".repeat(2 * names.len()));
            }
        }
        csv.push('\n');
    }

    create_dir(out)?;
    write_json(
        &out.join("perturbation.json"),
        &PerturbationReport {
            version: REPORT_VERSION,
            reference: &reference,
            results: &entries,
        },
    )?;
    write_text(&out.join("perturbation.csv"), &csv)?;

    let mut failure: Option<AppError> = None;
    for entry in &entries {
        match entry {
            PerturbationEntry::Converged(r) => {
                let worst = r.deviations.iter().cloned().fold(0.0, f64::max);
                println!(
                    "scale {}: max deviation {:.3}%, MRE {:.4} px",
                    r.scale,
                    100.0 * worst,
                    r.mre
                );
            }
            PerturbationEntry::Failed(f) => {
                println!("scale {}: failed: {}", f.scale, f.error);
                let err = if f.numerical {
                    AppError::Numerical(format!("scale {}: {}", f.scale, f.error))
                } else {
                    AppError::Config(format!("scale {}: {}", f.scale, f.error))
                };
                // A numerical failure outranks a config one for the exit code.
                if failure.as_ref().is_none_or(|e| e.exit_code() < err.exit_code()) {
                    failure = Some(err);
                }
            }
        }
    }
    failure.map_or(Ok(()), Err)
}

/// Index of a rendered scene written by `gen scene`. Paths are relative to
/// the manifest.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    /// World-to-camera.
    pub pose: PoseSE3,
}

fn load_views(manifest_path: &Path) -> Result<Vec<View>, AppError> {
    let manifest: SceneManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    manifest
        .views
        .iter()
        .map(|v| {
            Ok(View {
                image: Image::read(&base.join(&v.image))?.to_gray(),
                depth: DepthMap::read(&base.join(&v.depth))?,
                pose: v.pose,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct SelfcalReport<'a> {
    version: &'static str,
    initial_model: &'a CameraModel,
    model: &'a CameraModel,
    views: usize,
    trace: &'a SolveTrace,
}

fn trace_csv(init: &CameraModel, trace: &SolveTrace) -> Result<String, AppError> {
    let mut csv = String::from("epoch,loss,fx,fy,cx,cy,alpha,beta,xi\n");
    for record in &trace.iterations {
        let mut m = *init;
        if let Some(params) = &record.params {
            m.set_params(params)?;
        }
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            record.index, record.cost, m.fx, m.fy, m.cx, m.cy, m.alpha, m.beta, m.xi
        );
    }
    Ok(csv)
}

fn cmd_selfcal(
    config: &RunConfig,
    scene: Option<&Path>,
    views: Option<&Path>,
    kind: ModelKind,
    init: Option<&Path>,
    out: &Path,
) -> Result<(), AppError> {
    let views = match views {
        Some(manifest) => load_views(manifest)?,
        None => {
            let spec: SceneSpec = scene.map(read_json).transpose()?.unwrap_or_default();
            generate_scene(&spec, config.seed)?
        }
    };
    let first = views
        .first()
        .ok_or_else(|| AppError::Config("the scene has no views".into()))?;
    let init = match init {
        Some(path) => {
            let m: CameraModel = read_json(path)?;
            check_kind(Some(kind), &m, "--init")?;
            m
        }
        None => CameraModel::default_init(kind, first.image.width() as u32, first.image.height() as u32),
    };
    let (model, trace) = self_calibrate_photometric_from(&views, &init, &config.schedule)?;
    create_dir(out)?;
    write_json(&out.join("model.json"), &model)?;
    write_text(&out.join("trace.csv"), &trace_csv(&init, &trace)?)?;
    write_json(
        &out.join("report.json"),
        &SelfcalReport {
            version: REPORT_VERSION,
            initial_model: &init,
            model: &model,
            views: views.len(),
            trace: &trace,
        },
    )?;
    println!(
        "{}: loss {:.5} -> {:.5}, params {:?}",
        model.kind,
        trace.initial_cost,
        trace.final_cost,
        model.params()
    );
    Ok(())
}

fn cmd_rectify(
    model: &Path,
    image: &Path,
    target: Option<&Path>,
    mask_out: Option<&Path>,
    out: &Path,
) -> Result<(), AppError> {
    let model: CameraModel = read_json(model)?;
    let target = match target {
        Some(path) => read_json(path)?,
        None => default_rectification_target(&model),
    };
    let (rectified, mask) = rectify(&model, &target, &Image::read(image)?)?;
    create_parent(out)?;
    rectified.write(out)?;
    if let Some(path) = mask_out {
        create_parent(path)?;
        let (w, h) = (mask.width(), mask.height());
        Image::from_fn(w, h, |x, y| if *mask.get(x, y) { 1.0 } else { 0.0 }).write(path)?;
    }
    println!("{} of {} pixels covered", mask.count(), mask.len());
    Ok(())
}

fn cmd_cloud(model: &Path, depth: &Path, image: Option<&Path>, out: &Path) -> Result<(), AppError> {
    let model: CameraModel = read_json(model)?;
    let depth = DepthMap::read(depth)?;
    let color = image.map(Image::read).transpose()?;
    let cloud = depth_to_pointcloud(&model, &depth, color.as_ref())?;
    create_parent(out)?;
    cloud.write_ply(out)?;
    println!("{} points", cloud.len());
    Ok(())
}

fn cmd_gen_scene(config: &RunConfig, spec: Option<&Path>, out: &Path) -> Result<(), AppError> {
    let spec: SceneSpec = spec.map(read_json).transpose()?.unwrap_or_default();
    let views = generate_scene(&spec, config.seed)?;
    create_dir(out)?;
    let mut entries = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let entry = ViewEntry {
            image: format!("view_{i:03}.pgm").into(),
            depth: format!("view_{i:03}.dpth").into(),
            pose: view.pose,
        };
        view.image.write(&out.join(&entry.image))?;
        view.depth.write(&out.join(&entry.depth))?;
        entries.push(entry);
    }
    write_json(&out.join("camera.json"), &spec.camera)?;
    write_json(
        &out.join("views.json"),
        &SceneManifest {
            version: REPORT_VERSION.to_string(),
            seed: config.seed,
            spec,
            views: entries,
        },
    )?;
    println!("{} views written to {}", views.len(), out.display());
    Ok(())
}

fn cmd_gen_target(config: &RunConfig, model: &Path, spec: Option<&Path>, out: &Path) -> Result<(), AppError> {
    let model: CameraModel = read_json(model)?;
    let mut spec: TargetSpec = spec.map(read_json).transpose()?.unwrap_or_default();
    spec.seed = config.seed;
    let (data, _) = generate_target(&model, &spec)?;
    create_parent(out)?;
    data.save(out)?;
    println!(
        "{} frames, {} observations written to {}",
        data.frames.len(),
        data.observation_count(),
        out.display()
    );
    Ok(())
}
