use std::path::Path;

use selfcal::calib::CalibError;
use selfcal::optim::OptimError;
use selfcal::synth::SynthError;
use selfcal::CameraError;
use thiserror::Error;

/// Command failure, split by who is at fault.
#[derive(Debug, Error)]
pub enum AppError {
    /// Bad flags, config files or inputs. Exit code 2.
    #[error("{0}")]
    Config(String),
    /// The inputs were acceptable but the numerics failed. Exit code 3.
    #[error("{0}")]
    Numerical(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => 2,
            AppError::Numerical(_) => 3,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        AppError::Config(format!("{}: {err}", path.display()))
    }
}

impl From<CalibError> for AppError {
    fn from(e: CalibError) -> Self {
        if e.is_numerical() {
            AppError::Numerical(e.to_string())
        } else {
            AppError::Config(e.to_string())
        }
    }
}

impl From<SynthError> for AppError {
    fn from(e: SynthError) -> Self {
        if e.is_numerical() {
            AppError::Numerical(e.to_string())
        } else {
            AppError::Config(e.to_string())
        }
    }
}

impl From<CameraError> for AppError {
    fn from(e: CameraError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<OptimError> for AppError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::Invalid(msg) => AppError::Config(msg),
            other => AppError::Numerical(other.to_string()),
        }
    }
}
