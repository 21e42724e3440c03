//! `selfcal`: target calibration, perturbation studies, photometric
//! self-calibration, rectification and point clouds from the command line.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfcal::ModelKind;

use config::{Command, RunConfig};
use error::AppError;

#[derive(Parser)]
#[command(name = "selfcal", version, about = "Camera calibration with unified fisheye models")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Seed for scene and target generation [default: 0, or the config
    /// file's].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config field, e.g. `schedule.epochs=20` or
    /// `calib.lm.max_iters=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved run config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: selfcal::CameraError| e.to_string())
}

#[derive(Subcommand)]
enum CliCommand {
    /// Fit intrinsics and frame poses to a target dataset.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        /// pinhole, ucm, eucm or ds.
        #[arg(long, value_parser = parse_kind)]
        model: Option<ModelKind>,
        /// Initial intrinsics (model JSON) instead of the default guess.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Keep these intrinsics fixed and refit poses only.
        #[arg(long)]
        fixed_intrinsics: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recalibrate from scaled copies of a reference model.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = selfcal::calib::DEFAULT_PERTURBATION_SCALES)]
        scales: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover intrinsics from views with known depth and pose.
    Selfcal {
        /// Scene spec JSON to render.
        #[arg(long, conflicts_with = "views")]
        scene: Option<PathBuf>,
        /// views.json from `gen scene`.
        #[arg(long)]
        views: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind, default_value = "ucm")]
        model: ModelKind,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a fisheye image into a pinhole view.
    Rectify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Pinhole model JSON; defaults to the same focal lengths and center.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Also write the valid-pixel mask as a PGM.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unproject a depth map to a PLY point cloud.
    Cloud {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// Optional PGM/PPM for point colors.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic inputs.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Run a JSON run config.
    Run { config: PathBuf },
}

#[derive(Subcommand)]
enum GenCommand {
    /// Render a textured room scene: views, depth maps, poses.
    Scene {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate planar target observations.
    Target {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(cli: Cli) -> Result<RunConfig, AppError> {
    let command = match cli.command {
        CliCommand::Run { config } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(seed) = cli.common.seed {
                config.seed = seed;
            }
            return config.with_overrides(&cli.common.overrides);
        }
        CliCommand::Calibrate {
            data,
            model,
            init,
            fixed_intrinsics,
            out,
        } => Command::Calibrate {
            data,
            model,
            init,
            fixed_intrinsics,
            out,
        },
        CliCommand::Perturb {
            data,
            reference,
            scales,
            out,
        } => Command::Perturb {
            data,
            reference,
            scales,
            out,
        },
        CliCommand::Selfcal {
            scene,
            views,
            model,
            init,
            out,
        } => Command::Selfcal {
            scene,
            views,
            model,
            init,
            out,
        },
        CliCommand::Rectify {
            model,
            image,
            target,
            mask,
            out,
        } => Command::Rectify {
            model,
            image,
            target,
            mask,
            out,
        },
        CliCommand::Cloud {
            model,
            depth,
            image,
            out,
        } => Command::Cloud {
            model,
            depth,
            image,
            out,
        },
        CliCommand::Gen(GenCommand::Scene { spec, out }) => Command::GenScene { spec, out },
        CliCommand::Gen(GenCommand::Target { model, spec, out }) => Command::GenTarget { model, spec, out },
    };
    let config = RunConfig {
        seed: cli.common.seed.unwrap_or(0),
        ..RunConfig::new(command)
    };
    config.with_overrides(&cli.common.overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let print = cli.common.print_config;
    let result = resolve(cli).and_then(|config| {
        if print {
            // A closed pipe (`| head`) is not an error worth a panic.
            let text = serde_json::to_string_pretty(&config).expect("config serializes");
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        } else {
            commands::run(&config)
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
