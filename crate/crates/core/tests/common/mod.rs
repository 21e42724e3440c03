//! Helpers shared by the integration test targets. Nothing here calls into
//! the code paths it is used to check.
#![allow(dead_code)]

use nalgebra::{DMatrix, Matrix2x3};
use rand::Rng;
use selfcal::{CameraModel, ModelKind, Pixel, Point3};

pub const WIDTH: u32 = 384;
pub const HEIGHT: u32 = 256;

/// Random valid intrinsics for `kind` on a 384×256 image.
pub fn random_model<R: Rng>(rng: &mut R, kind: ModelKind) -> CameraModel {
    let mut p = vec![
        rng.random_range(80.0..400.0),
        rng.random_range(80.0..400.0),
        rng.random_range(150.0..230.0),
        rng.random_range(100.0..156.0),
    ];
    match kind {
        ModelKind::Pinhole => {}
        ModelKind::Ucm => p.push(rng.random_range(0.0..0.95)),
        ModelKind::Eucm => p.extend([rng.random_range(0.0..0.95), rng.random_range(0.5..2.0)]),
        ModelKind::Ds => p.extend([rng.random_range(0.0..0.95), rng.random_range(-0.6..0.6)]),
    }
    CameraModel::from_params(kind, &p, WIDTH, HEIGHT).unwrap()
}

/// Random pixel in the image that the model can unproject.
pub fn random_valid_pixel<R: Rng>(rng: &mut R, model: &CameraModel) -> Pixel {
    loop {
        let p = Pixel::new(
            rng.random_range(0.0..f64::from(model.width)),
            rng.random_range(0.0..f64::from(model.height)),
        );
        if model.unproject_ray(&p).is_ok() {
            return p;
        }
    }
}

/// Random point inside the forward field of view, distance in [0.2, 20].
pub fn random_visible_point<R: Rng>(rng: &mut R, model: &CameraModel) -> Point3 {
    loop {
        let p = Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..1.0),
        );
        if p.norm() < 0.1 {
            continue;
        }
        let p = p.normalize() * rng.random_range(0.2..20.0);
        if model.can_project(&p) {
            return p;
        }
    }
}

/// Plain scalar evaluation of the projection formulas, written out per kind.
pub fn scalar_project(m: &CameraModel, p: &Point3) -> (f64, f64) {
    let (du, dv) = scalar_offset(m, p);
    (du + m.cx, dv + m.cy)
}

/// Projection relative to the principal point. Differencing this instead of
/// the absolute pixel keeps the rounding of `+ cx` out of tiny FD steps.
fn scalar_offset(m: &CameraModel, p: &Point3) -> (f64, f64) {
    let (x, y, z) = (p.x, p.y, p.z);
    let den = match m.kind {
        ModelKind::Pinhole => z,
        ModelKind::Ucm => m.alpha * (x * x + y * y + z * z).sqrt() + (1.0 - m.alpha) * z,
        ModelKind::Eucm => m.alpha * (m.beta * (x * x + y * y) + z * z).sqrt() + (1.0 - m.alpha) * z,
        ModelKind::Ds => {
            let d1 = (x * x + y * y + z * z).sqrt();
            let k = m.xi * d1 + z;
            m.alpha * (x * x + y * y + k * k).sqrt() + (1.0 - m.alpha) * k
        }
    };
    (m.fx * x / den, m.fy * y / den)
}

fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1e-2)
}

/// Central finite differences of [`scalar_project`] with respect to the point
/// and the intrinsics.
pub fn fd_jacobians(m: &CameraModel, p: &Point3) -> (Matrix2x3<f64>, DMatrix<f64>) {
    let mut d_point = Matrix2x3::zeros();
    for j in 0..3 {
        let h = 1e-6 * p.norm();
        let (mut a, mut b) = (*p, *p);
        a[j] += h;
        b[j] -= h;
        let (ua, va) = scalar_offset(m, &a);
        let (ub, vb) = scalar_offset(m, &b);
        d_point[(0, j)] = (ua - ub) / (2.0 * h);
        d_point[(1, j)] = (va - vb) / (2.0 * h);
    }
    let params = m.params();
    let mut d_intr = DMatrix::zeros(2, params.len());
    for j in 0..params.len() {
        let h = fd_step(params[j]);
        let (mut a, mut b) = (*m, *m);
        let mut pa = params.clone();
        pa[j] += h;
        a.set_params(&pa).unwrap();
        let mut pb = params.clone();
        pb[j] -= h;
        b.set_params(&pb).unwrap();
        let (ua, va) = scalar_offset(&a, p);
        let (ub, vb) = scalar_offset(&b, p);
        d_intr[(0, j)] = ((ua - ub) + (a.cx - b.cx)) / (2.0 * h);
        d_intr[(1, j)] = ((va - vb) + (a.cy - b.cy)) / (2.0 * h);
    }
    (d_point, d_intr)
}

/// Largest elementwise relative error, with a small floor on the scale so
/// entries that vanish analytically compare absolutely.
pub fn max_relative_error<'a>(
    analytic: impl IntoIterator<Item = &'a f64>,
    numeric: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Reference intrinsics on a 384×256 image: published toolbox values for the
/// fisheye kinds, an arbitrary moderate field of view for the pinhole.
pub fn reference_model(kind: ModelKind) -> CameraModel {
    let params: &[f64] = match kind {
        ModelKind::Pinhole => &[190.0, 195.0, 186.5, 132.6],
        ModelKind::Ucm => &[235.4, 245.1, 186.5, 132.6, 0.650],
        ModelKind::Eucm => &[235.6, 245.4, 186.4, 132.7, 0.597, 1.112],
        ModelKind::Ds => &[181.4, 188.9, 186.4, 132.6, 0.571, -0.230],
    };
    CameraModel::from_params(kind, params, WIDTH, HEIGHT).unwrap()
}

/// Unit ray through pixel `(u, v)` found by Newton iteration on
/// [`scalar_project`]; forward-facing rays only.
pub fn scalar_unproject(m: &CameraModel, u: f64, v: f64) -> nalgebra::Vector3<f64> {
    let (mut a, mut b) = ((u - m.cx) / m.fx, (v - m.cy) / m.fy);
    for _ in 0..100 {
        let f = |a: f64, b: f64| scalar_project(m, &nalgebra::Vector3::new(a, b, 1.0));
        let (pu, pv) = f(a, b);
        let (ru, rv) = (pu - u, pv - v);
        if ru.hypot(rv) < 1e-12 {
            break;
        }
        let h = 1e-7;
        let (au, av) = f(a + h, b);
        let (bu, bv) = f(a, b + h);
        let (j00, j10, j01, j11) = ((au - pu) / h, (av - pv) / h, (bu - pu) / h, (bv - pv) / h);
        let det = j00 * j11 - j01 * j10;
        a -= (j11 * ru - j01 * rv) / det;
        b -= (-j10 * ru + j00 * rv) / det;
    }
    nalgebra::Vector3::new(a, b, 1.0).normalize()
}

/// Image of the 3-D segment `a`–`b` as seen by `model`: a ridge with a
/// Gaussian cross-section of width `sigma` pixels along the projected curve.
pub fn render_segment(m: &CameraModel, a: &Point3, b: &Point3, sigma: f64) -> selfcal::synth::Image {
    let (w, h) = (m.width as usize, m.height as usize);
    let mut data = vec![0.0f64; w * h];
    let reach = (3.0 * sigma).ceil() as i64;
    let n = 4000;
    for i in 0..=n {
        let p = a + (b - a) * (i as f64 / n as f64);
        let Ok(q) = m.project(&p) else { continue };
        let (cu, cv) = (q.u.round() as i64, q.v.round() as i64);
        for y in (cv - reach).max(0)..=(cv + reach).min(h as i64 - 1) {
            for x in (cu - reach).max(0)..=(cu + reach).min(w as i64 - 1) {
                let d2 = (x as f64 - q.u).powi(2) + (y as f64 - q.v).powi(2);
                let value = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = &mut data[y as usize * w + x as usize];
                *cell = cell.max(value);
            }
        }
    }
    selfcal::synth::Image::from_vec(w, h, 1, data).unwrap()
}

/// RMS distance of ridge samples from their best-fit line, for a ridge
/// expected near the segment `p0`–`p1`. Ridge positions are intensity
/// centroids across the expected direction; the outer 10% at each end and
/// any sample touching masked pixels are skipped. Also returns the sample
/// count.
pub fn ridge_line_rms(
    image: &selfcal::synth::Image,
    mask: &selfcal::raster::Mask,
    p0: Pixel,
    p1: Pixel,
) -> (f64, usize) {
    let horizontal = (p1.u - p0.u).abs() >= (p1.v - p0.v).abs();
    let (a0, b0, a1, b1) = if horizontal {
        (p0.u, p0.v, p1.u, p1.v)
    } else {
        (p0.v, p0.u, p1.v, p1.u)
    };
    let (lo, hi) = (a0.min(a1), a0.max(a1));
    let span = hi - lo;
    let window = 6i64;
    let mut samples = Vec::new();
    let mut s = (lo + 0.1 * span).ceil() as i64;
    while (s as f64) <= hi - 0.1 * span {
        let expected = b0 + (b1 - b0) * (s as f64 - a0) / (a1 - a0);
        let center = expected.round() as i64;
        let mut sum = 0.0;
        let mut moment = 0.0;
        let mut ok = true;
        for t in center - window..=center + window {
            let (x, y) = if horizontal { (s, t) } else { (t, s) };
            if x < 0
                || y < 0
                || x >= image.width() as i64
                || y >= image.height() as i64
                || !*mask.get(x as usize, y as usize)
            {
                ok = false;
                break;
            }
            let value = image.get(x as usize, y as usize, 0);
            if value > 0.05 {
                sum += value;
                moment += value * t as f64;
            }
        }
        if ok && sum > 0.5 {
            let c = moment / sum;
            samples.push(if horizontal { (s as f64, c) } else { (c, s as f64) });
        }
        s += 1;
    }
    let n = samples.len() as f64;
    let (mx, my) = samples.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0 / n, y + p.1 / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &samples {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    // Normal of the total-least-squares line: eigenvector of the smaller
    // eigenvalue of the scatter matrix.
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (nx, ny) = (-angle.sin(), angle.cos());
    let ss: f64 = samples
        .iter()
        .map(|&(x, y)| ((x - mx) * nx + (y - my) * ny).powi(2))
        .sum();
    ((ss / n).sqrt(), samples.len())
}
