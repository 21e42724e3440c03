mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfcal::{CameraModel, ModelKind, Point3};

#[test]
fn round_trip_all_kinds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in ModelKind::ALL {
        for _ in 0..2000 {
            let m = random_model(&mut rng, kind);
            let p = random_valid_pixel(&mut rng, &m);
            let depth = rng.random_range(0.1..100.0);
            let point = m.unproject(&p, depth).unwrap();
            assert!((point.norm() - depth).abs() < 1e-9 * depth);
            let back = m.project(&point).unwrap();
            assert!(back.distance(&p) < 1e-6, "{kind}: {m:?} {p:?} -> {back:?}");
        }
    }
}

#[test]
fn projection_matches_scalar_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in ModelKind::ALL {
        for _ in 0..500 {
            let m = random_model(&mut rng, kind);
            let p = random_visible_point(&mut rng, &m);
            let px = m.project(&p).unwrap();
            let (u, v) = scalar_project(&m, &p);
            assert!((px.u - u).abs() < 1e-9 && (px.v - v).abs() < 1e-9);
        }
    }
}

#[test]
fn jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for kind in ModelKind::ALL {
        for _ in 0..1000 {
            let m = random_model(&mut rng, kind);
            let p = random_visible_point(&mut rng, &m);
            let (_, jac) = m.project_with_jacobians(&p).unwrap();
            let (fd_point, fd_intr) = fd_jacobians(&m, &p);
            let e1 = max_relative_error(jac.d_point.iter(), fd_point.iter());
            let e2 = max_relative_error(jac.d_intrinsics.iter(), fd_intr.iter());
            assert!(e1 < 1e-4 && e2 < 1e-4, "{kind}: {e1:e} {e2:e} at {p:?}");
        }
    }
}

#[test]
fn unprojection_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for kind in ModelKind::ALL {
        for _ in 0..200 {
            let m = random_model(&mut rng, kind);
            let px = random_valid_pixel(&mut rng, &m);
            let depth = rng.random_range(0.5..10.0);
            let (_, jac) = m.unproject_with_jacobian(&px, depth).unwrap();
            let params = m.params();
            for j in 0..params.len() {
                let h = 1e-6 * params[j].abs().max(1e-2);
                let eval = |delta: f64| {
                    let mut q = params.clone();
                    q[j] += delta;
                    let mut mm = m;
                    mm.set_params(&q).unwrap();
                    mm.unproject(&px, depth)
                };
                let (Ok(a), Ok(b)) = (eval(h), eval(-h)) else { continue };
                let fd = (a - b) / (2.0 * h);
                let err = (jac.column(j) - fd).amax() / fd.amax().max(1e-3);
                assert!(err < 1e-4, "{kind} param {j}: {err:e}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn pinhole_and_ucm_alpha_zero_agree(
        fx in 50.0f64..500.0, fy in 50.0f64..500.0,
        x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.01f64..10.0,
    ) {
        let pin = CameraModel::pinhole(fx, fy, 190.0, 130.0, WIDTH, HEIGHT).unwrap();
        let ucm = CameraModel::from_params(ModelKind::Ucm, &[fx, fy, 190.0, 130.0, 0.0], WIDTH, HEIGHT).unwrap();
        let p = Point3::new(x, y, z);
        let a = pin.project(&p).unwrap();
        let b = ucm.project(&p).unwrap();
        prop_assert!((a.u - b.u).abs() < 1e-12 * a.u.abs().max(1.0));
        prop_assert!((a.v - b.v).abs() < 1e-12 * a.v.abs().max(1.0));
    }

    #[test]
    fn projection_is_scale_invariant(seed in any::<u64>(), kind_idx in 0usize..4, lambda in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(&mut rng, ModelKind::ALL[kind_idx]);
        let p = random_visible_point(&mut rng, &m);
        let a = m.project(&p).unwrap();
        let b = m.project(&(p * lambda)).unwrap();
        // Off-image points near the edge of the field of view land ~1e5 px
        // out, where 1e-9 px is a few ulps; there the bound scales with |pixel|.
        let tol = 1e-9f64.max(1e-13 * a.u.abs().max(a.v.abs()));
        prop_assert!(a.distance(&b) < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn eucm_with_unit_beta_is_ucm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ucm = random_model(&mut rng, ModelKind::Ucm);
        let eucm = ucm.with_kind(ModelKind::Eucm);
        let ds = ucm.with_kind(ModelKind::Ds);
        prop_assert_eq!(eucm.beta, 1.0);
        prop_assert_eq!(ds.xi, 0.0);
        let p = random_visible_point(&mut rng, &ucm);
        let a = ucm.project(&p).unwrap();
        let b = eucm.project(&p).unwrap();
        let c = ds.project(&p).unwrap();
        prop_assert!((a.u - b.u).abs() < 1e-12 * a.u.abs().max(1.0) && (a.v - b.v).abs() < 1e-12 * a.v.abs().max(1.0));
        prop_assert!((a.u - c.u).abs() < 1e-12 * a.u.abs().max(1.0) && (a.v - c.v).abs() < 1e-12 * a.v.abs().max(1.0));
    }
}
