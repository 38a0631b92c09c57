//! Full-reference quality metrics (PSNR, SSIM, GMSD), per-frame evaluation
//! of stacks and mean ± std report rows.

use std::fmt;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{domain, validation, Result};
use crate::par;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// GMSD stability constant at unit data range.
pub const GMSD_C: f64 = 0.0026;

fn same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(validation(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(validation("images are empty"));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(domain(format!("data range must be positive, got {data_range}")));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical images give `+∞`.
pub fn psnr(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    same_shape(&a, &b)?;
    check_range(data_range)?;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW - 1) as f64 / 2.0;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with a symmetric 1-D kernel.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            tmp[[r, c]] = (0..n).map(|j| k[j] * x[[r, c + j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..n).map(|j| k[j] * tmp[[r + j, c]]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5)
/// over all fully contained windows.
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    same_shape(&a, &b)?;
    check_range(data_range)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(domain(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let k = gaussian_window();
    let a = a.to_owned();
    let b = b.to_owned();
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    for (((&ma, &mb), (&saa, &sbb)), &sab) in mu_a.iter().zip(&mu_b).zip(aa.iter().zip(&bb)).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

fn pool2(x: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = (x.nrows() / 2, x.ncols() / 2);
    Array2::from_shape_fn((h, w), |(r, c)| {
        0.25 * (x[[2 * r, 2 * c]] + x[[2 * r + 1, 2 * c]] + x[[2 * r, 2 * c + 1]] + x[[2 * r + 1, 2 * c + 1]])
    })
}

/// Prewitt gradient magnitude over interior pixels.
fn prewitt_magnitude(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h - 2, w - 2), |(r, c)| {
        let (r, c) = (r + 1, c + 1);
        let gx = (x[[r - 1, c - 1]] + x[[r, c - 1]] + x[[r + 1, c - 1]] - x[[r - 1, c + 1]] - x[[r, c + 1]] - x[[r + 1, c + 1]])
            / 3.0;
        let gy = (x[[r - 1, c - 1]] + x[[r - 1, c]] + x[[r - 1, c + 1]] - x[[r + 1, c - 1]] - x[[r + 1, c]] - x[[r + 1, c + 1]])
            / 3.0;
        (gx * gx + gy * gy).sqrt()
    })
}

/// Gradient magnitude similarity deviation: 2×2 average pooling, Prewitt
/// gradients on interior pixels, population standard deviation of the
/// similarity map with `c = 0.0026·range²`.
pub fn gmsd(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    same_shape(&a, &b)?;
    check_range(data_range)?;
    if a.nrows() < 6 || a.ncols() < 6 {
        return Err(domain(format!("GMSD needs at least 6x6 pixels, got {:?}", a.dim())));
    }
    let ma = prewitt_magnitude(&pool2(a));
    let mb = prewitt_magnitude(&pool2(b));
    let c = GMSD_C * data_range * data_range;
    let gms: Vec<f64> = ma
        .iter()
        .zip(mb.iter())
        .map(|(&x, &y)| (2.0 * x * y + c) / (x * x + y * y + c))
        .collect();
    let n = gms.len() as f64;
    let mean = gms.iter().sum::<f64>() / n;
    Ok((gms.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Projection,
    Image,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Projection => "projection",
            Domain::Image => "image",
        })
    }
}

/// Mean and population standard deviation; any infinite sample makes both
/// infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    #[serde(serialize_with = "finite_or_string")]
    pub mean: f64,
    #[serde(serialize_with = "finite_or_string")]
    pub std: f64,
}

fn finite_or_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_value(*v))
    }
}

fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

impl Stats {
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        if v.iter().any(|x| x.is_infinite()) {
            return Self {
                mean: f64::INFINITY,
                std: if v.iter().all(|x| x.is_infinite()) { 0.0 } else { f64::INFINITY },
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

/// Linear-interpolated quantile of unsorted data (`q` in `[0, 1]`).
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    #[serde(serialize_with = "finite_or_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub gmsd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub domain: Domain,
    pub data_range: f64,
    pub psnr: Stats,
    pub ssim: Stats,
    pub gmsd: Stats,
    pub per_frame: Vec<FrameMetrics>,
}

impl MetricSummary {
    pub fn psnr_values(&self) -> Vec<f64> {
        self.per_frame.iter().map(|m| m.psnr).collect()
    }

    pub fn gmsd_values(&self) -> Vec<f64> {
        self.per_frame.iter().map(|m| m.gmsd).collect()
    }

    pub fn ssim_values(&self) -> Vec<f64> {
        self.per_frame.iter().map(|m| m.ssim).collect()
    }
}

/// Per-frame metrics of two stacks (frames × rows × cols).
pub fn evaluate_pair(denoised: &Array3<f64>, reference: &Array3<f64>, domain: Domain, data_range: f64) -> Result<MetricSummary> {
    if denoised.dim() != reference.dim() {
        return Err(validation(format!(
            "stack shapes differ: {:?} vs {:?}",
            denoised.dim(),
            reference.dim()
        )));
    }
    check_range(data_range)?;
    let frames = denoised.dim().0;
    let per_frame = par::map_range(frames, |f| -> Result<FrameMetrics> {
        let a = denoised.index_axis(Axis(0), f);
        let b = reference.index_axis(Axis(0), f);
        Ok(FrameMetrics {
            psnr: psnr(a, b, data_range)?,
            ssim: ssim(a, b, data_range)?,
            gmsd: gmsd(a, b, data_range)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&FrameMetrics) -> f64| Stats::of(&per_frame.iter().map(f).collect::<Vec<_>>());
    Ok(MetricSummary {
        domain,
        data_range,
        psnr: col(|m| m.psnr),
        ssim: col(|m| m.ssim),
        gmsd: col(|m| m.gmsd),
        per_frame,
    })
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub dose: f64,
    pub regime: String,
    pub domain: Domain,
    pub metric: String,
    #[serde(serialize_with = "finite_or_string")]
    pub mean: f64,
    #[serde(serialize_with = "finite_or_string")]
    pub std: f64,
    pub data_range: f64,
}

pub fn report_rows(dataset: &str, dose: f64, regime: &str, s: &MetricSummary) -> Vec<ReportRow> {
    [("ssim", s.ssim), ("psnr", s.psnr), ("gmsd", s.gmsd)]
        .into_iter()
        .map(|(metric, st)| ReportRow {
            dataset: dataset.into(),
            dose,
            regime: regime.into(),
            domain: s.domain,
            metric: metric.into(),
            mean: st.mean,
            std: st.std,
            data_range: s.data_range,
        })
        .collect()
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("dataset,dose,regime,domain,metric,mean,std,data_range\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.dataset,
            r.dose,
            r.regime,
            r.domain,
            r.metric,
            format_value(r.mean),
            format_value(r.std),
            r.data_range
        ));
    }
    out
}
