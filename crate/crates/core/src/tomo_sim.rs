//! Parallel-beam tomography bench: ellipse phantoms, Joseph forward
//! projection, Ram-Lak filtered back-projection, and noisy projection
//! sequences with per-frame tube current modulation.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::ct_physics::{self, AcquisitionMeta, ProjectionStack, TransmissionStack};
use crate::error::{domain, validation, Error, Result};
use crate::par;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomImage {
    /// Attenuation per unit length, indexed `[row, col]` with row 0 at the top.
    pub data: Array2<f64>,
    pub pixel_size: f64,
}

impl PhantomImage {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub angles: Vec<f64>,
    pub n_detector_cols: usize,
    pub detector_spacing: f64,
}

impl ScanGeometry {
    /// `n_angles` uniform angles over `[0, π)`.
    pub fn parallel(n_angles: usize, n_detector_cols: usize, detector_spacing: f64) -> Result<Self> {
        let g = Self {
            angles: (0..n_angles).map(|k| PI * k as f64 / n_angles as f64).collect(),
            n_detector_cols,
            detector_spacing,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() {
            return Err(Error::Config("scan geometry needs at least one angle".into()));
        }
        if self.angles.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("scan angles must be strictly increasing".into()));
        }
        if self.n_detector_cols == 0 || !(self.detector_spacing > 0.0) {
            return Err(Error::Config("detector needs columns and a positive spacing".into()));
        }
        Ok(())
    }

    fn detector_center(&self) -> f64 {
        (self.n_detector_cols as f64 - 1.0) / 2.0
    }

    /// Quadrature weight of each angle for back-projection over a π period.
    fn angle_weights(&self) -> Vec<f64> {
        let a = &self.angles;
        let n = a.len();
        if n == 1 {
            return vec![PI];
        }
        (0..n)
            .map(|k| {
                let prev = if k == 0 { a[n - 1] - PI } else { a[k - 1] };
                let next = if k == n - 1 { a[0] + PI } else { a[k + 1] };
                (next - prev) / 2.0
            })
            .collect()
    }
}

/// One ellipsoid of the phantom: in-plane semi-axes `a`, `b`, centre
/// `(x0, y0)`, rotation `phi` (radians), axial semi-axis `c` about `z = 0`.
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi: f64,
    c: f64,
}

fn shepp_logan_ellipsoids() -> [Ellipsoid; 10] {
    // Modified (high-contrast) Shepp-Logan, axial extents of the 3-D version.
    let rows: [[f64; 7]; 10] = [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0, 0.81],
        [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0, 0.78],
        [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0, 0.22],
        [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0, 0.28],
        [0.1, 0.21, 0.25, 0.0, 0.35, 0.0, 0.41],
        [0.1, 0.046, 0.046, 0.0, 0.1, 0.0, 0.05],
        [0.1, 0.046, 0.046, 0.0, -0.1, 0.0, 0.05],
        [0.1, 0.046, 0.023, -0.08, -0.605, 0.0, 0.05],
        [0.1, 0.023, 0.023, 0.0, -0.606, 0.0, 0.02],
        [0.1, 0.023, 0.046, 0.06, -0.605, 0.0, 0.02],
    ];
    rows.map(|r| Ellipsoid {
        value: r[0],
        a: r[1],
        b: r[2],
        x0: r[3],
        y0: r[4],
        phi: r[5].to_radians(),
        c: r[6],
    })
}

fn jittered(seed: u64) -> [Ellipsoid; 10] {
    let mut e = shepp_logan_ellipsoids();
    if seed == 0 {
        return e;
    }
    let mut rng = rng::stream(rng::derive(seed, "phantom"), 0);
    let j = |r: &mut crate::rng::StreamRng| r.random_range(-0.05..0.05);
    for el in &mut e {
        let (da, db) = (j(&mut rng), j(&mut rng));
        let (dx, dy) = (j(&mut rng), j(&mut rng));
        let dphi = j(&mut rng);
        // centre shifts are at most 2.5% of the matching axis
        el.x0 += 0.5 * dx * el.a;
        el.y0 += 0.5 * dy * el.b;
        el.a *= 1.0 + da;
        el.b *= 1.0 + db;
        el.phi += dphi;
    }
    e
}

const SUPERSAMPLE: usize = 2;

fn rasterize(ellipsoids: &[Ellipsoid], n: usize, z: f64) -> Array2<f64> {
    let step = 2.0 / n as f64;
    let sub = step / SUPERSAMPLE as f64;
    let active: Vec<(Ellipsoid, f64)> = ellipsoids
        .iter()
        .filter_map(|e| {
            let r = 1.0 - (z / e.c).powi(2);
            (r > 0.0).then(|| (*e, r.sqrt()))
        })
        .collect();
    let rows = par::map_range(n, |iy| {
        let mut row = vec![0.0; n];
        for (ix, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = -1.0 + ix as f64 * step + (sx as f64 + 0.5) * sub;
                    let y = 1.0 - iy as f64 * step - (sy as f64 + 0.5) * sub;
                    for (e, scale) in &active {
                        let (s, c) = e.phi.sin_cos();
                        let (dx, dy) = (x - e.x0, y - e.y0);
                        let u = (dx * c + dy * s) / (e.a * scale);
                        let v = (-dx * s + dy * c) / (e.b * scale);
                        if u * u + v * v <= 1.0 {
                            acc += e.value;
                        }
                    }
                }
            }
            *out = (acc / (SUPERSAMPLE * SUPERSAMPLE) as f64).max(0.0);
        }
        row
    });
    Array2::from_shape_vec((n, n), rows.concat()).expect("n*n values")
}

/// Modified Shepp-Logan phantom on an `n × n` grid spanning `[-1, 1]²`.
/// Nonzero `variant_seed` jitters every ellipse by at most 5%.
pub fn shepp_logan_phantom(n: usize, variant_seed: u64) -> Result<PhantomImage> {
    Ok(shepp_logan_slices(n, &[0.0], variant_seed)?.remove(0))
}

/// Axial slices of the 3-D phantom at heights `z` (same units as the
/// in-plane coordinates, phantom centre at `z = 0`).
pub fn shepp_logan_slices(n: usize, z: &[f64], variant_seed: u64) -> Result<Vec<PhantomImage>> {
    if n < 16 {
        return Err(domain(format!("phantom size must be at least 16, got {n}")));
    }
    let e = jittered(variant_seed);
    Ok(z.iter()
        .map(|&z| PhantomImage {
            data: rasterize(&e, n, z),
            pixel_size: 2.0 / n as f64,
        })
        .collect())
}

fn check_span(n: usize, pixel_size: f64, geom: &ScanGeometry) -> Result<()> {
    geom.validate()?;
    let span = geom.n_detector_cols as f64 * geom.detector_spacing;
    let diagonal = n as f64 * pixel_size * 2f64.sqrt();
    if span + 1e-9 < diagonal {
        return Err(Error::Config(format!(
            "detector span {span:.4} does not cover the image diagonal {diagonal:.4}"
        )));
    }
    Ok(())
}

/// Joseph line integrals of one image at one angle.
fn project_angle(img: ArrayView2<f64>, ps: f64, theta: f64, geom: &ScanGeometry, out: &mut [f64]) {
    let n = img.nrows();
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let dc = geom.detector_center();
    let ds = geom.detector_spacing;
    if cos.abs() >= sin.abs() {
        // march along image rows; x is affine in the detector coordinate s
        let weight = ps / cos.abs();
        for (j, o) in out.iter_mut().enumerate() {
            let s = (j as f64 - dc) * ds;
            let mut acc = 0.0;
            for iy in 0..n {
                let y = (c - iy as f64) * ps;
                let x = s / cos - y * sin / cos;
                acc += lerp_row(img, iy, x / ps + c);
            }
            *o = acc * weight;
        }
    } else {
        let weight = ps / sin.abs();
        for (j, o) in out.iter_mut().enumerate() {
            let s = (j as f64 - dc) * ds;
            let mut acc = 0.0;
            for ix in 0..n {
                let x = (ix as f64 - c) * ps;
                let y = s / sin - x * cos / sin;
                acc += lerp_col(img, ix, c - y / ps);
            }
            *o = acc * weight;
        }
    }
}

#[inline]
fn lerp_row(img: ArrayView2<f64>, row: usize, u: f64) -> f64 {
    let n = img.ncols() as isize;
    let f = u.floor();
    let i = f as isize;
    let t = u - f;
    let at = |k: isize| if k >= 0 && k < n { img[[row, k as usize]] } else { 0.0 };
    if i < -1 || i >= n {
        return 0.0;
    }
    (1.0 - t) * at(i) + t * at(i + 1)
}

#[inline]
fn lerp_col(img: ArrayView2<f64>, col: usize, v: f64) -> f64 {
    let n = img.nrows() as isize;
    let f = v.floor();
    let i = f as isize;
    let t = v - f;
    let at = |k: isize| if k >= 0 && k < n { img[[k as usize, col]] } else { 0.0 };
    if i < -1 || i >= n {
        return 0.0;
    }
    (1.0 - t) * at(i) + t * at(i + 1)
}

/// Sinogram of one image: one frame per angle, one detector row.
pub fn forward_project(img: &PhantomImage, geom: &ScanGeometry) -> Result<ProjectionStack> {
    forward_project_slices(std::slice::from_ref(img), geom)
}

/// Stack axial slices as detector rows: frame `a`, row `r` is the projection
/// of slice `r` at angle `a`.
pub fn forward_project_slices(slices: &[PhantomImage], geom: &ScanGeometry) -> Result<ProjectionStack> {
    let Some(first) = slices.first() else {
        return Err(validation("no slices to project"));
    };
    let (n, ps) = (first.n(), first.pixel_size);
    if slices.iter().any(|s| s.data.dim() != (n, n) || s.pixel_size != ps) {
        return Err(validation("all slices must share size and pixel size"));
    }
    check_span(n, ps, geom)?;
    let rows = slices.len();
    let cols = geom.n_detector_cols;
    let mut data = vec![0.0; geom.n_angles() * rows * cols];
    par::for_each_chunk_mut(&mut data, rows * cols, |a, frame| {
        for (r, s) in slices.iter().enumerate() {
            project_angle(s.data.view(), ps, geom.angles[a], geom, &mut frame[r * cols..(r + 1) * cols]);
        }
    });
    ProjectionStack::new(
        Array3::from_shape_vec((geom.n_angles(), rows, cols), data).expect("sized"),
        AcquisitionMeta::unit(geom.n_angles()),
    )
}

/// Spatial Ram-Lak kernel sampled at detector spacing `d`, laid out for a
/// circular convolution of length `len`.
fn ram_lak_kernel(len: usize, d: f64) -> Vec<f64> {
    let mut h = vec![0.0; len];
    h[0] = 1.0 / (4.0 * d * d);
    for k in 1..len / 2 + 1 {
        if k % 2 == 1 {
            let v = -1.0 / (PI * PI * (k * k) as f64 * d * d);
            h[k] = v;
            h[len - k] = v;
        }
    }
    h
}

struct RampFilter {
    len: usize,
    kernel_hat: Vec<Complex<f64>>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    spacing: f64,
}

impl RampFilter {
    fn new(n_cols: usize, spacing: f64) -> Self {
        let len = (2 * n_cols).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(len);
        let ifft = planner.plan_fft_inverse(len);
        let mut kernel_hat: Vec<Complex<f64>> =
            ram_lak_kernel(len, spacing).into_iter().map(|v| Complex::new(v, 0.0)).collect();
        fft.process(&mut kernel_hat);
        Self {
            len,
            kernel_hat,
            fft,
            ifft,
            spacing,
        }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        self.fft.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= k;
        }
        self.ifft.process(&mut buf);
        let norm = self.spacing / self.len as f64;
        buf[..row.len()].iter().map(|c| c.re * norm).collect()
    }
}

fn fbp_plane(sino: ArrayView2<f64>, geom: &ScanGeometry, n: usize, ps: f64, filter: &RampFilter) -> Array2<f64> {
    let filtered: Vec<Vec<f64>> = sino.axis_iter(Axis(0)).map(|r| filter.apply(r.as_slice().unwrap_or(&r.to_vec()))).collect();
    let weights = geom.angle_weights();
    let trig: Vec<(f64, f64)> = geom.angles.iter().map(|a| a.sin_cos()).collect();
    let c = (n as f64 - 1.0) / 2.0;
    let dc = geom.detector_center();
    let ds = geom.detector_spacing;
    let cols = geom.n_detector_cols as isize;
    let rows = par::map_range(n, |iy| {
        let y = (c - iy as f64) * ps;
        let mut out = vec![0.0; n];
        for (a, q) in filtered.iter().enumerate() {
            let (sin, cos) = trig[a];
            let w = weights[a];
            for (ix, o) in out.iter_mut().enumerate() {
                let x = (ix as f64 - c) * ps;
                let u = (x * cos + y * sin) / ds + dc;
                let f = u.floor();
                let i = f as isize;
                let t = u - f;
                let at = |k: isize| if k >= 0 && k < cols { q[k as usize] } else { 0.0 };
                *o += w * ((1.0 - t) * at(i) + t * at(i + 1));
            }
        }
        out
    });
    Array2::from_shape_vec((n, n), rows.concat()).expect("n*n")
}

/// Ram-Lak filtered back-projection of a single-row sinogram onto an
/// `n × n` grid with pixel size equal to the detector spacing.
pub fn fbp_reconstruct(sino: &ProjectionStack, geom: &ScanGeometry, n: usize) -> Result<PhantomImage> {
    if sino.rows() != 1 {
        return Err(validation(format!("expected a single-row sinogram, got {} rows", sino.rows())));
    }
    Ok(fbp_reconstruct_slices(sino, geom, n)?.remove(0))
}

/// Reconstruct every detector row as its own slice.
pub fn fbp_reconstruct_slices(sino: &ProjectionStack, geom: &ScanGeometry, n: usize) -> Result<Vec<PhantomImage>> {
    geom.validate()?;
    if sino.frames() != geom.n_angles() {
        return Err(validation(format!(
            "sinogram has {} frames, geometry has {} angles",
            sino.frames(),
            geom.n_angles()
        )));
    }
    if sino.cols() != geom.n_detector_cols {
        return Err(validation(format!(
            "sinogram has {} columns, geometry has {}",
            sino.cols(),
            geom.n_detector_cols
        )));
    }
    if n == 0 {
        return Err(validation("reconstruction size must be positive"));
    }
    let filter = RampFilter::new(geom.n_detector_cols, geom.detector_spacing);
    Ok((0..sino.rows())
        .map(|r| PhantomImage {
            data: fbp_plane(sino.data.index_axis(Axis(1), r), geom, n, geom.detector_spacing, &filter),
            pixel_size: geom.detector_spacing,
        })
        .collect())
}

/// Tube current per frame: a sinusoid between `low` and `high` mA.
pub fn sinusoidal_schedule(frames: usize, low: f64, high: f64, periods: f64) -> Vec<f64> {
    (0..frames)
        .map(|f| {
            let phase = 2.0 * PI * periods * f as f64 / frames as f64;
            low + (high - low) * 0.5 * (1.0 + phase.sin())
        })
        .collect()
}

/// Inputs of [`make_sequence_dataset`].
#[derive(Clone, Debug)]
pub struct SequenceSpec<'a> {
    /// Axial slices, one per detector row.
    pub phantoms: &'a [PhantomImage],
    pub geom: &'a ScanGeometry,
    /// Photons per mA for each detector column.
    pub flux_per_ma: Vec<f64>,
    /// Full-dose tube current per frame, mA.
    pub ma_schedule: Vec<f64>,
    pub sigma_e2: f64,
    pub alpha: f64,
    pub seed: u64,
}

/// Clean projections plus noisy transmissions measured at `alpha` times the
/// scheduled tube current.
pub fn make_sequence_dataset(spec: &SequenceSpec) -> Result<(ProjectionStack, TransmissionStack, AcquisitionMeta)> {
    if spec.ma_schedule.len() != spec.geom.n_angles() {
        return Err(validation(format!(
            "mA schedule has {} entries for {} angles",
            spec.ma_schedule.len(),
            spec.geom.n_angles()
        )));
    }
    if !(spec.alpha > 0.0 && spec.alpha <= 1.0) {
        return Err(domain(format!("dose fraction must lie in (0, 1], got {}", spec.alpha)));
    }
    let mut clean = forward_project_slices(spec.phantoms, spec.geom)?;
    clean.meta = AcquisitionMeta {
        tube_current: spec.ma_schedule.clone(),
        flux_per_ma: Some(spec.flux_per_ma.clone()),
        dose_fraction: 1.0,
        electronic_variance: spec.sigma_e2,
        electronic_mean: 0.0,
    };
    clean.meta.validate(clean.frames(), clean.cols())?;
    let mut t = ct_physics::projection_to_transmission(&clean)?;
    t.meta.tube_current.iter_mut().for_each(|m| *m *= spec.alpha);
    t.meta.dose_fraction = spec.alpha;
    let noisy = ct_physics::simulate_measurement(&t, spec.seed)?;
    let meta = noisy.meta.clone();
    Ok((clean, noisy, meta))
}

/// Interior RMSE between two images over the centred disk whose radius is
/// `fraction` of the half-width.
pub fn interior_rmse(a: &Array2<f64>, b: &Array2<f64>, fraction: f64) -> f64 {
    let n = a.nrows();
    let c = (n as f64 - 1.0) / 2.0;
    let r2 = (fraction * n as f64 / 2.0).powi(2);
    let (mut acc, mut count) = (0.0, 0usize);
    for ((iy, ix), &v) in a.indexed_iter() {
        let (dy, dx) = (iy as f64 - c, ix as f64 - c);
        if dx * dx + dy * dy <= r2 {
            acc += (v - b[[iy, ix]]).powi(2);
            count += 1;
        }
    }
    (acc / count.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(n: usize, radius: f64, mu: f64) -> PhantomImage {
        let c = (n as f64 - 1.0) / 2.0;
        let ps = 2.0 / n as f64;
        // 4x4 supersampled disk so the analytic chord applies
        let data = Array2::from_shape_fn((n, n), |(iy, ix)| {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = (ix as f64 - c + (sx as f64 + 0.5) / 4.0 - 0.5) * ps;
                    let y = (iy as f64 - c + (sy as f64 + 0.5) / 4.0 - 0.5) * ps;
                    if x * x + y * y <= radius * radius {
                        hits += 1;
                    }
                }
            }
            mu * hits as f64 / 16.0
        });
        PhantomImage { data, pixel_size: ps }
    }

    fn geometry(n: usize, angles: usize) -> ScanGeometry {
        let cols = ((n as f64 * 1.45).ceil() as usize) | 1;
        ScanGeometry::parallel(angles, cols, 2.0 / n as f64).unwrap()
    }

    #[test]
    fn phantom_basics() {
        assert!(matches!(shepp_logan_phantom(8, 0), Err(Error::Domain(_))));
        let a = shepp_logan_phantom(64, 0).unwrap();
        let b = shepp_logan_phantom(64, 0).unwrap();
        assert_eq!(a, b);
        let max = a.data.iter().cloned().fold(0.0, f64::max);
        assert!(max <= 2.0 && max > 0.9);
        assert!(a.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn variant_differs_but_shares_support() {
        let n = 128;
        let a = shepp_logan_phantom(n, 0).unwrap();
        let b = shepp_logan_phantom(n, 1).unwrap();
        assert_ne!(a, b);
        // the outer ellipse grown by 10% must contain both supports
        let c = (n as f64 - 1.0) / 2.0;
        let ps = 2.0 / n as f64;
        for ((iy, ix), &v) in b.data.indexed_iter() {
            let x = (ix as f64 - c) * ps;
            let y = (c - iy as f64) * ps;
            let inside = (x / (0.69 * 1.1)).powi(2) + (y / (0.92 * 1.1)).powi(2) <= 1.0;
            if v > 0.0 || a.data[[iy, ix]] > 0.0 {
                assert!(inside, "support leaks at ({iy}, {ix})");
            }
        }
    }

    #[test]
    fn zero_image_gives_zero_sinogram_and_back() {
        let n = 32;
        let img = PhantomImage {
            data: Array2::zeros((n, n)),
            pixel_size: 2.0 / n as f64,
        };
        let g = geometry(n, 12);
        let s = forward_project(&img, &g).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
        let r = fbp_reconstruct(&s, &g, n).unwrap();
        assert!(r.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_detector_is_rejected() {
        let img = shepp_logan_phantom(32, 0).unwrap();
        let g = ScanGeometry::parallel(4, 32, 2.0 / 32.0).unwrap();
        assert!(matches!(forward_project(&img, &g), Err(Error::Config(_))));
    }

    #[test]
    fn central_ray_matches_chord_length() {
        let n = 256;
        let (r, mu) = (0.5, 0.7);
        let img = disk(n, r, mu);
        let g = ScanGeometry::parallel(8, 372, 2.0 / n as f64).unwrap();
        let s = forward_project(&img, &g).unwrap();
        // detector centre falls between two columns; average them
        for a in 0..8 {
            let centre = 0.5 * (s.data[[a, 0, 185]] + s.data[[a, 0, 186]]);
            assert!((centre / (2.0 * r * mu) - 1.0).abs() < 0.02, "angle {a}: {centre}");
        }
    }

    #[test]
    fn projection_is_linear() {
        let n = 48;
        let f = shepp_logan_phantom(n, 0).unwrap();
        let h = shepp_logan_phantom(n, 3).unwrap();
        let g = geometry(n, 17);
        let combo = PhantomImage {
            data: &f.data * 1.7 + &h.data * -0.4,
            pixel_size: f.pixel_size,
        };
        let pf = forward_project(&f, &g).unwrap().data;
        let ph = forward_project(&h, &g).unwrap().data;
        let pc = forward_project(&combo, &g).unwrap().data;
        let scale = pc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for ((c, a), b) in pc.iter().zip(&pf).zip(&ph) {
            assert!((c - (1.7 * a - 0.4 * b)).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn projection_preserves_mass() {
        let n = 128;
        let img = shepp_logan_phantom(n, 0).unwrap();
        let g = geometry(n, 45);
        let s = forward_project(&img, &g).unwrap();
        let mass = img.data.sum() * img.pixel_size * img.pixel_size;
        for a in 0..g.n_angles() {
            let m = s.data.index_axis(Axis(0), a).sum() * g.detector_spacing;
            assert!((m / mass - 1.0).abs() < 0.01, "angle {a}: {m} vs {mass}");
        }
    }

    #[test]
    fn adjacent_frames_are_more_alike_than_distant_ones() {
        let n = 64;
        let img = shepp_logan_phantom(n, 0).unwrap();
        let g = geometry(n, 360);
        let s = forward_project(&img, &g).unwrap().data;
        let mad = |a: usize, b: usize| {
            (&s.index_axis(Axis(0), a) - &s.index_axis(Axis(0), b)).mapv(f64::abs).mean().unwrap()
        };
        let (mut near, mut far) = (0.0, 0.0);
        for a in 0..270 {
            near += mad(a, a + 1);
            far += mad(a, a + 90);
        }
        assert!(near < far);
    }

    #[test]
    fn fbp_recovers_uniform_disk() {
        let n = 256;
        let img = disk(n, 0.6, 0.5);
        let g = geometry(n, 360);
        let r = fbp_reconstruct(&forward_project(&img, &g).unwrap(), &g, n).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let (mut acc, mut cnt) = (0.0, 0);
        for ((iy, ix), &v) in r.data.indexed_iter() {
            let rr = ((iy as f64 - c).powi(2) + (ix as f64 - c).powi(2)).sqrt() * 2.0 / n as f64;
            if rr < 0.5 {
                acc += v;
                cnt += 1;
            }
        }
        let mean = acc / cnt as f64;
        assert!((mean / 0.5 - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn fbp_error_shrinks_with_more_angles() {
        let n = 128;
        let img = shepp_logan_phantom(n, 0).unwrap();
        let errs: Vec<f64> = [90, 180, 360]
            .iter()
            .map(|&na| {
                let g = geometry(n, na);
                let r = fbp_reconstruct(&forward_project(&img, &g).unwrap(), &g, n).unwrap();
                interior_rmse(&r.data, &img.data, 0.8)
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn fbp_checks_shapes() {
        let g = geometry(32, 10);
        let s = ProjectionStack::new(Array3::zeros((9, 1, g.n_detector_cols)), AcquisitionMeta::unit(9)).unwrap();
        assert!(matches!(fbp_reconstruct(&s, &g, 32), Err(Error::Validation(_))));
    }

    fn bench_spec<'a>(
        slices: &'a [PhantomImage],
        g: &'a ScanGeometry,
        schedule: Vec<f64>,
        flux: f64,
        se2: f64,
    ) -> SequenceSpec<'a> {
        SequenceSpec {
            phantoms: slices,
            geom: g,
            flux_per_ma: vec![flux; g.n_detector_cols],
            ma_schedule: schedule,
            sigma_e2: se2,
            alpha: 1.0,
            seed: 4,
        }
    }

    #[test]
    fn vanishing_noise_reproduces_clean_transmission() {
        let n = 32;
        let slices = vec![shepp_logan_phantom(n, 0).unwrap()];
        let g = geometry(n, 20);
        let (clean, noisy, meta) = make_sequence_dataset(&bench_spec(&slices, &g, vec![1.0; 20], 1e9, 0.0)).unwrap();
        for (p, t) in clean.data.iter().zip(noisy.data.iter()) {
            assert!(((-p).exp() - t).abs() < 1e-3);
        }
        let f0 = meta.incident_flux(0).unwrap();
        assert!((1..20).all(|f| meta.incident_flux(f).unwrap() == f0));
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn frame_noise_anticorrelates_with_tube_current() {
        let n = 64;
        let slices = vec![shepp_logan_phantom(n, 0).unwrap()];
        let g = geometry(n, 180);
        let schedule = sinusoidal_schedule(180, 50.0, 400.0, 2.0);
        let (clean, noisy, _) = make_sequence_dataset(&bench_spec(&slices, &g, schedule.clone(), 20.0, 25.0)).unwrap();
        let var: Vec<f64> = (0..180)
            .map(|f| {
                let d = &noisy.data.index_axis(Axis(0), f) - &clean.data.index_axis(Axis(0), f).mapv(|p| (-p).exp());
                d.mapv(|v| v * v).mean().unwrap()
            })
            .collect();
        let rho = pearson(&ranks(&var), &ranks(&schedule));
        assert!(rho < -0.9, "spearman {rho}");
    }
}
