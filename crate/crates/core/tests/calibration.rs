mod common;

use common::reference_model;
use nalgebra::Vector3;
use selfcal::calib::{
    calibrate, generate_target, mean_reprojection_error, perturb_and_recalibrate, refit_poses, residuals, CalibError,
    CalibrationMode, Frame, FramePose, TargetDataset, TargetSpec,
};
use selfcal::{CameraModel, ModelKind, PoseSE3};

fn dataset(model: &CameraModel, sigma: f64, seed: u64) -> (TargetDataset, Vec<PoseSE3>) {
    let spec = TargetSpec {
        noise_sigma: sigma,
        seed,
        ..TargetSpec::default()
    };
    generate_target(model, &spec).unwrap()
}

fn max_relative_deviation(a: &CameraModel, b: &CameraModel) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .map(|(x, y)| ((x - y) / y).abs())
        .fold(0.0, f64::max)
}

fn true_poses(poses: &[PoseSE3]) -> Vec<FramePose> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| FramePose {
            frame_id: i as u64,
            pose: *p,
        })
        .collect()
}

#[test]
fn noiseless_recovery_every_kind() {
    for kind in ModelKind::ALL {
        let truth = reference_model(kind);
        let (data, _) = dataset(&truth, 0.0, 1);
        let report = calibrate(&data, kind, None).unwrap();
        assert!(
            max_relative_deviation(&report.model, &truth) < 1e-3,
            "{kind}: {:?}",
            report.model
        );
        assert!(report.mre < 1e-6, "{kind}: {}", report.mre);
        assert!(report.mre <= report.initial_mre);
        assert_eq!(report.poses.len(), data.frames.len());
        assert_eq!(report.mode, CalibrationMode::Full);
        let costs = report.trace.accepted_costs();
        assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn noisy_ucm_over_seeds() {
    let truth = reference_model(ModelKind::Ucm);
    for seed in 0..10 {
        let (data, _) = dataset(&truth, 0.2, 100 + seed);
        let report = calibrate(&data, ModelKind::Ucm, None).unwrap();
        assert!((report.mre - 0.2).abs() <= 0.05, "seed {seed}: {}", report.mre);
        assert!(
            max_relative_deviation(&report.model, &truth) < 0.01,
            "seed {seed}: {:?}",
            report.model
        );
    }
}

#[test]
fn pinhole_fit_of_fisheye_data_is_much_worse() {
    let truth = reference_model(ModelKind::Ucm);
    let (data, _) = dataset(&truth, 0.2, 5);
    let ucm = calibrate(&data, ModelKind::Ucm, None).unwrap();
    let pinhole = calibrate(&data, ModelKind::Pinhole, None).unwrap();
    assert!(
        pinhole.mre > 5.0 * ucm.mre,
        "pinhole {} vs ucm {}",
        pinhole.mre,
        ucm.mre
    );
}

#[test]
fn refit_with_truth_sits_at_noise_floor() {
    let truth = reference_model(ModelKind::Ucm);
    let (data, _) = dataset(&truth, 0.2, 6);
    let refit = refit_poses(&data, &truth).unwrap();
    assert_eq!(refit.mode, CalibrationMode::PoseOnly);
    assert_eq!(refit.model, truth);
    // Expected mean of a 2-D Gaussian norm, σ·√(π/2) ≈ 0.2507, less the
    // small share absorbed by the fitted poses.
    assert!((refit.mre - 0.25).abs() < 0.03, "{}", refit.mre);

    let mut inflated = truth;
    inflated.fx *= 1.1;
    let worse = refit_poses(&data, &inflated).unwrap();
    assert!(worse.mre > refit.mre);
}

#[test]
fn refit_reproduces_calibration_mre() {
    let truth = reference_model(ModelKind::Eucm);
    let (data, _) = dataset(&truth, 0.2, 7);
    let full = calibrate(&data, ModelKind::Eucm, None).unwrap();
    let refit = refit_poses(&data, &full.model).unwrap();
    assert!((refit.mre - full.mre).abs() < 1e-9, "{} vs {}", refit.mre, full.mre);
}

#[test]
fn report_is_self_contained() {
    let truth = reference_model(ModelKind::Ds);
    let (data, _) = dataset(&truth, 0.2, 8);
    let report = calibrate(&data, ModelKind::Ds, None).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    let back: selfcal::calib::CalibrationReport = serde_json::from_str(&text).unwrap();
    let again = mean_reprojection_error(&data, &back.model, &back.poses).unwrap();
    assert!((again.mre - report.mre).abs() < 1e-9);

    // One-line recomputation over the residual dump.
    let (rows, excluded) = residuals(&data, &report.model, &report.poses);
    assert_eq!(excluded, 0);
    let direct = rows.iter().map(|r| (r.du * r.du + r.dv * r.dv).sqrt()).sum::<f64>() / rows.len() as f64;
    assert!((direct - report.mre).abs() < 1e-12);
}

#[test]
fn mre_ignores_ordering() {
    let truth = reference_model(ModelKind::Ucm);
    let (data, poses) = dataset(&truth, 0.3, 9);
    let poses = true_poses(&poses);
    let base = mean_reprojection_error(&data, &truth, &poses).unwrap();
    let mut shuffled = data.clone();
    shuffled.frames.reverse();
    for f in &mut shuffled.frames {
        f.observations.reverse();
        f.observations.rotate_left(3);
    }
    let mut rev_poses = poses.clone();
    rev_poses.reverse();
    let other = mean_reprojection_error(&shuffled, &truth, &rev_poses).unwrap();
    assert_eq!(base.mre, other.mre);
}

#[test]
fn zero_noise_consistent_inputs_give_zero() {
    let truth = reference_model(ModelKind::Eucm);
    let (data, poses) = dataset(&truth, 0.0, 10);
    let s = mean_reprojection_error(&data, &truth, &true_poses(&poses)).unwrap();
    assert!(s.mre < 1e-12);
    assert_eq!(s.count, data.observation_count());
}

#[test]
fn identical_frames_are_degenerate() {
    let truth = reference_model(ModelKind::Ucm);
    let (mut data, _) = dataset(&truth, 0.0, 11);
    let first = data.frames[0].clone();
    data.frames = (0..5)
        .map(|i| Frame {
            id: i,
            observations: first.observations.clone(),
        })
        .collect();
    assert!(matches!(
        calibrate(&data, ModelKind::Ucm, None),
        Err(CalibError::Degenerate(_))
    ));
}

#[test]
fn too_few_frames_rejected() {
    let truth = reference_model(ModelKind::Ucm);
    let (mut data, _) = dataset(&truth, 0.0, 12);
    data.frames.truncate(2);
    assert!(matches!(
        calibrate(&data, ModelKind::Ucm, None),
        Err(CalibError::TooFewFrames { used: 2, required: 3 })
    ));
    // Frames with fewer than six observations are set aside, not fatal.
    let (mut data, _) = dataset(&truth, 0.0, 12);
    data.frames[0].observations.truncate(5);
    let report = calibrate(&data, ModelKind::Ucm, None).unwrap();
    assert_eq!(report.excluded_frames, vec![data.frames[0].id]);
    assert_eq!(report.poses.len(), data.frames.len() - 1);
}

#[test]
fn unprojectable_observations_are_listed() {
    // A pixel far outside the image cannot be unprojected by a model whose
    // field of view ends near the image border.
    let truth = reference_model(ModelKind::Eucm);
    let (mut data, _) = dataset(&truth, 0.0, 13);
    data.frames[0].observations[0].pixel.u = 1e6;
    let report = calibrate(&data, ModelKind::Eucm, Some(&truth)).unwrap();
    assert_eq!(report.excluded.len(), 1);
    assert_eq!(report.excluded[0].frame_id, data.frames[0].id);
    assert_eq!(report.observations, data.observation_count() - 1);
}

#[test]
fn perturbation_unit_scale_matches_baseline() {
    let truth = reference_model(ModelKind::Eucm);
    let (data, _) = dataset(&truth, 0.2, 14);
    let baseline = calibrate(&data, ModelKind::Eucm, Some(&truth)).unwrap();
    let results = perturb_and_recalibrate(&data, &truth, &[1.0]);
    let r = results[0].as_ref().unwrap();
    assert!((r.mre - baseline.mre).abs() < 1e-9);
    for (c, b) in r.converged.iter().zip(baseline.model.params()) {
        assert!(((c - b) / b).abs() < 1e-6);
    }
}

#[test]
fn perturbation_noiseless_within_one_percent() {
    let truth = reference_model(ModelKind::Eucm);
    let (data, _) = dataset(&truth, 0.0, 15);
    let results = perturb_and_recalibrate(&data, &truth, &[1.1, 0.9]);
    for r in results {
        let r = r.unwrap();
        assert!(
            r.deviations.iter().all(|&d| d < 0.01),
            "scale {}: {:?}",
            r.scale,
            r.deviations
        );
        for ((&c, &reference), &d) in r.converged.iter().zip(&r.reference).zip(&r.deviations) {
            assert_eq!(d, ((c - reference) / reference).abs());
        }
        for (&i, &reference) in r.initial.iter().zip(&r.reference) {
            assert_eq!(i, reference * r.scale);
        }
    }
}

#[test]
fn perturbation_noisy_within_three_percent() {
    let truth = reference_model(ModelKind::Eucm);
    for seed in 0..5 {
        let (data, _) = dataset(&truth, 0.2, 200 + seed);
        for r in perturb_and_recalibrate(&data, &truth, &[1.1, 0.9]) {
            let r = r.unwrap();
            assert!(
                r.deviations.iter().all(|&d| d < 0.03),
                "seed {seed}: {:?}",
                r.deviations
            );
        }
    }
}

#[test]
fn invalid_scale_is_reported_per_entry() {
    let truth = reference_model(ModelKind::Ucm);
    let (data, _) = dataset(&truth, 0.0, 16);
    // α·1.6 ≥ 1 is outside the model domain; the other scale still runs.
    let results = perturb_and_recalibrate(&data, &truth, &[1.6, 1.0]);
    assert!(results[0].is_err());
    assert!(!results[0].as_ref().unwrap_err().numerical);
    assert!(results[1].is_ok());
}

#[test]
fn generated_corners_face_the_camera() {
    // Sanity check on the generator: every observation is in front of the
    // board plane as seen from the camera.
    let truth = reference_model(ModelKind::Ds);
    let (data, poses) = dataset(&truth, 0.0, 17);
    for (frame, pose) in data.frames.iter().zip(&poses) {
        let normal = pose.rotation * Vector3::z();
        for o in &frame.observations {
            assert!(normal.dot(&pose.transform_point(&data.board[o.corner_id])) > 0.0);
        }
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = dataset(&reference_model(ModelKind::Ds), 0.3, 8);
    let path = dir.path().join("target.json");
    data.save(&path).unwrap();
    assert_eq!(TargetDataset::load(&path).unwrap(), data);
    std::fs::write(&path, r#"{"board": {}, "extra": 1}"#).unwrap();
    assert!(matches!(TargetDataset::load(&path), Err(CalibError::Json { .. })));
}
