//! Resolved run configuration. Every invocation, whether from flags or from a
//! JSON file, is turned into a [`RunConfig`] before anything runs.

use std::path::{Path, PathBuf};

use selfcal::calib::{perturbation_options, CalibrationOptions, DEFAULT_PERTURBATION_SCALES};
use selfcal::optim::GdSchedule;
use selfcal::ModelKind;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::AppError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    /// Target calibration solver settings. Absent means the command's own
    /// defaults (perturbation runs warm-start with frozen intrinsics).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib: Option<CalibrationOptions>,
    /// Photometric self-calibration schedule.
    #[serde(default)]
    pub schedule: GdSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Calibrate {
        data: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<ModelKind>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixed_intrinsics: Option<PathBuf>,
        out: PathBuf,
    },
    Perturb {
        data: PathBuf,
        reference: PathBuf,
        #[serde(default = "default_scales")]
        scales: Vec<f64>,
        out: PathBuf,
    },
    Selfcal {
        /// Scene description to render (the default scene when neither this
        /// nor `views` is given).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scene: Option<PathBuf>,
        /// Manifest of pre-rendered views written by `gen scene`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        views: Option<PathBuf>,
        model: ModelKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<PathBuf>,
        out: PathBuf,
    },
    Rectify {
        model: PathBuf,
        image: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<PathBuf>,
        out: PathBuf,
    },
    Cloud {
        model: PathBuf,
        depth: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image: Option<PathBuf>,
        out: PathBuf,
    },
    GenScene {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<PathBuf>,
        out: PathBuf,
    },
    GenTarget {
        model: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<PathBuf>,
        out: PathBuf,
    },
}

fn default_scales() -> Vec<f64> {
    DEFAULT_PERTURBATION_SCALES.to_vec()
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            seed: 0,
            calib: None,
            schedule: GdSchedule::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths inside a config file are relative to the file.
        if let Some(base) = path.parent() {
            config.command.rebase(base);
        }
        Ok(config)
    }

    pub fn calib_options(&self) -> CalibrationOptions {
        self.calib.unwrap_or_else(|| match self.command {
            Command::Perturb { .. } => perturbation_options(),
            _ => CalibrationOptions::default(),
        })
    }

    /// Applies `path.to.field=value` overrides. Values are parsed as JSON
    /// when possible and taken as strings otherwise; the result must still
    /// deserialize, so misspelled fields are rejected.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self, AppError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        self.calib = Some(self.calib_options());
        let mut tree = serde_json::to_value(&self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| AppError::Config(format!("override `{item}` is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let map = node
                    .as_object_mut()
                    .ok_or_else(|| AppError::Config(format!("override `{key}`: `{part}` is not inside a section")))?;
                if i + 1 == parts.len() {
                    map.insert(part.to_string(), value.clone());
                    break;
                }
                node = map
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()));
            }
        }
        serde_json::from_value(tree).map_err(|e| AppError::Config(format!("invalid override: {e}")))
    }

    pub fn validate(&self) -> Result<(), AppError> {
        self.calib_options().lm.validate()?;
        self.schedule.validate()?;
        let missing: Vec<String> = self
            .command
            .inputs()
            .into_iter()
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(AppError::Config(format!("missing input: {}", missing.join(", "))));
        }
        match &self.command {
            Command::Calibrate {
                model: None,
                init: None,
                fixed_intrinsics: None,
                ..
            } => Err(AppError::Config(
                "calibrate needs --model, --init or --fixed-intrinsics".into(),
            )),
            Command::Calibrate {
                init: Some(_),
                fixed_intrinsics: Some(_),
                ..
            } => Err(AppError::Config("--init and --fixed-intrinsics are exclusive".into())),
            Command::Selfcal {
                scene: Some(_),
                views: Some(_),
                ..
            } => Err(AppError::Config("--scene and --views are exclusive".into())),
            Command::Perturb { scales, .. } if scales.is_empty() => Err(AppError::Config("no scales given".into())),
            _ => Ok(()),
        }
    }
}

impl Command {
    /// Files the command reads.
    pub fn inputs(&self) -> Vec<&Path> {
        let (required, optional): (Vec<&PathBuf>, Vec<&Option<PathBuf>>) = match self {
            Command::Calibrate {
                data,
                init,
                fixed_intrinsics,
                ..
            } => (vec![data], vec![init, fixed_intrinsics]),
            Command::Perturb { data, reference, .. } => (vec![data, reference], vec![]),
            Command::Selfcal { scene, views, init, .. } => (vec![], vec![scene, views, init]),
            Command::Rectify {
                model, image, target, ..
            } => (vec![model, image], vec![target]),
            Command::Cloud {
                model, depth, image, ..
            } => (vec![model, depth], vec![image]),
            Command::GenScene { spec, .. } => (vec![], vec![spec]),
            Command::GenTarget { model, spec, .. } => (vec![model], vec![spec]),
        };
        required
            .into_iter()
            .map(PathBuf::as_path)
            .chain(optional.into_iter().filter_map(|p| p.as_deref()))
            .collect()
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut paths: Vec<&mut PathBuf> = Vec::new();
        match self {
            Command::Calibrate {
                data,
                init,
                fixed_intrinsics,
                out,
                ..
            } => {
                paths.extend([data, out]);
                paths.extend(init.as_mut());
                paths.extend(fixed_intrinsics.as_mut());
            }
            Command::Perturb {
                data, reference, out, ..
            } => paths.extend([data, reference, out]),
            Command::Selfcal {
                scene,
                views,
                init,
                out,
                ..
            } => {
                paths.push(out);
                paths.extend(scene.as_mut());
                paths.extend(views.as_mut());
                paths.extend(init.as_mut());
            }
            Command::Rectify {
                model,
                image,
                target,
                mask,
                out,
            } => {
                paths.extend([model, image, out]);
                paths.extend(target.as_mut());
                paths.extend(mask.as_mut());
            }
            Command::Cloud {
                model,
                depth,
                image,
                out,
            } => {
                paths.extend([model, depth, out]);
                paths.extend(image.as_mut());
            }
            Command::GenScene { spec, out } => {
                paths.push(out);
                paths.extend(spec.as_mut());
            }
            Command::GenTarget { model, spec, out } => {
                paths.extend([model, out]);
                paths.extend(spec.as_mut());
            }
        }
        paths
    }

    fn rebase(&mut self, base: &Path) {
        for p in self.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
