//! CT measurement physics: Lambert-Beer conversions, mixed Poisson-Gaussian
//! measurement, the Gaussian variance approximation and variance-matched
//! low-dose simulation.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Error, Result};
use crate::par;
use crate::rng;

/// Transmissions are clamped to this floor before taking the log.
pub const TRANSMISSION_CLAMP: f64 = 1e-6;

/// Acquisition parameters attached to every stack.
///
/// The per-frame incident flux is `tube_current[f] * flux_per_ma[col]`, so a
/// dose change only rescales `tube_current`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionMeta {
    /// Effective tube current per frame, mA.
    pub tube_current: Vec<f64>,
    /// Photons per mA for each detector column, when known.
    pub flux_per_ma: Option<Vec<f64>>,
    pub dose_fraction: f64,
    /// Electronic noise variance, photons².
    pub electronic_variance: f64,
    pub electronic_mean: f64,
}

impl AcquisitionMeta {
    /// Metadata for noise-free data where flux is unknown.
    pub fn unit(frames: usize) -> Self {
        Self {
            tube_current: vec![1.0; frames],
            flux_per_ma: None,
            dose_fraction: 1.0,
            electronic_variance: 0.0,
            electronic_mean: 0.0,
        }
    }

    pub fn frames(&self) -> usize {
        self.tube_current.len()
    }

    pub fn validate(&self, frames: usize, cols: usize) -> Result<()> {
        if self.tube_current.len() != frames {
            return Err(validation(format!(
                "metadata lists {} tube currents for {frames} frames",
                self.tube_current.len()
            )));
        }
        if let Some(i) = self.tube_current.iter().position(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(validation(format!("tube current of frame {i} is not positive")));
        }
        if let Some(flux) = &self.flux_per_ma {
            if flux.len() != cols {
                return Err(validation(format!("metadata lists {} column fluxes for {cols} columns", flux.len())));
            }
            if let Some(i) = flux.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(validation(format!("incident flux of column {i} is not positive")));
            }
        }
        if !(self.dose_fraction > 0.0 && self.dose_fraction <= 1.0) {
            return Err(validation(format!("dose fraction {} outside (0, 1]", self.dose_fraction)));
        }
        if !(self.electronic_variance >= 0.0 && self.electronic_variance.is_finite()) {
            return Err(validation("electronic variance must be finite and nonnegative"));
        }
        if self.electronic_mean != 0.0 {
            return Err(validation("electronic mean must be 0"));
        }
        Ok(())
    }

    fn require_flux(&self) -> Result<&[f64]> {
        self.flux_per_ma
            .as_deref()
            .ok_or_else(|| Error::Config("incident flux is not recorded for this stack".into()))
    }

    /// Incident flux I0 of every column for one frame.
    pub fn incident_flux(&self, frame: usize) -> Result<Vec<f64>> {
        let ma = self.tube_current[frame];
        Ok(self.require_flux()?.iter().map(|f| f * ma).collect())
    }
}

/// Line integrals, frames × rows × cols.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack {
    pub data: Array3<f64>,
    pub meta: AcquisitionMeta,
}

/// Transmission data `exp(-p)`, frames × rows × cols.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionStack {
    pub data: Array3<f64>,
    pub meta: AcquisitionMeta,
}

macro_rules! stack_common {
    ($t:ty) => {
        impl $t {
            pub fn new(data: Array3<f64>, meta: AcquisitionMeta) -> Result<Self> {
                let (f, _, c) = data.dim();
                meta.validate(f, c)?;
                Ok(Self {
                    data: data.as_standard_layout().into_owned(),
                    meta,
                })
            }

            pub fn frames(&self) -> usize {
                self.data.dim().0
            }

            pub fn rows(&self) -> usize {
                self.data.dim().1
            }

            pub fn cols(&self) -> usize {
                self.data.dim().2
            }
        }
    };
}

stack_common!(ProjectionStack);
stack_common!(TransmissionStack);

fn first_non_finite(data: &Array3<f64>) -> Option<(usize, usize, usize)> {
    data.indexed_iter().find(|(_, v)| !v.is_finite()).map(|(ix, _)| ix)
}

fn frame_len(data: &Array3<f64>) -> usize {
    let (_, r, c) = data.dim();
    r * c
}

pub fn projection_to_transmission(p: &ProjectionStack) -> Result<TransmissionStack> {
    if let Some(ix) = first_non_finite(&p.data) {
        return Err(validation(format!("non-finite projection value at {ix:?}")));
    }
    Ok(TransmissionStack {
        data: p.data.mapv(|v| (-v).exp()),
        meta: p.meta.clone(),
    })
}

/// `p = -ln(max(T, 1e-6))`. Returns the stack and the number of clamped
/// pixels.
pub fn transmission_to_projection(t: &TransmissionStack) -> (ProjectionStack, usize) {
    let mut clamped = 0;
    let data = t.data.mapv(|v| {
        if !(v >= TRANSMISSION_CLAMP) {
            clamped += 1;
            -TRANSMISSION_CLAMP.ln()
        } else {
            -v.ln()
        }
    });
    (
        ProjectionStack {
            data,
            meta: t.meta.clone(),
        },
        clamped,
    )
}

/// Draw measured transmissions `(Poisson(I0 T) + N(0, σe²)) / I0`.
///
/// Counts are not clipped, so electronic noise may produce negative
/// transmissions; clamping happens only at the log step.
pub fn simulate_measurement(t_clean: &TransmissionStack, seed: u64) -> Result<TransmissionStack> {
    let meta = &t_clean.meta;
    let flux = meta.require_flux()?;
    if let Some(ix) = t_clean.data.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)).map(|(i, _)| i) {
        return Err(validation(format!("clean transmission at {ix:?} is negative or non-finite")));
    }
    let sigma_e = meta.electronic_variance.sqrt();
    let cols = t_clean.cols();
    let mut out = t_clean.data.as_standard_layout().into_owned();
    let len = frame_len(&out);
    let slice = out.as_slice_mut().expect("standard layout");
    par::for_each_chunk_mut(slice, len, |f, frame| {
        let mut rng = rng::stream(seed, f as u64);
        let ma = meta.tube_current[f];
        let electronic = Normal::new(0.0, sigma_e).expect("finite sigma");
        for (k, v) in frame.iter_mut().enumerate() {
            let i0 = ma * flux[k % cols];
            let counts = poisson(i0 * *v, &mut rng) + electronic.sample(&mut rng);
            *v = counts / i0;
        }
    });
    Ok(TransmissionStack {
        data: out,
        meta: meta.clone(),
    })
}

fn poisson(lambda: f64, rng: &mut impl Rng) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else {
        Poisson::new(lambda).expect("positive finite rate").sample(rng)
    }
}

/// Gaussian approximation of the measured transmission variance:
/// `σx² + μx/I0 + σe²/I0²`.
pub fn gaussian_total_variance(mu_x: f64, sigma_x2: f64, i0: f64, sigma_e2: f64) -> Result<f64> {
    if !(i0 > 0.0) {
        return Err(domain(format!("incident flux must be positive, got {i0}")));
    }
    if sigma_x2 < 0.0 || sigma_e2 < 0.0 {
        return Err(domain("variances must be nonnegative"));
    }
    Ok(sigma_x2 + mu_x / i0 + sigma_e2 / (i0 * i0))
}

/// Variance to add to a full-dose transmission so that the result carries
/// the noise of flux `α·I0`.
pub fn low_dose_added_variance(t: f64, alpha: f64, i0: f64, sigma_e2: f64) -> f64 {
    let quantum = (1.0 - alpha) / alpha * t.max(0.0) / i0;
    let electronic = (1.0 - alpha * alpha) / (alpha * alpha) * sigma_e2 / (i0 * i0);
    quantum + electronic
}

/// Simulate a dose fraction `alpha` from full-dose measured transmissions
/// by Gaussian variance matching.
pub fn simulate_low_dose(t_fd: &TransmissionStack, alpha: f64, seed: u64) -> Result<TransmissionStack> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("dose fraction must lie in (0, 1), got {alpha}")));
    }
    let meta = &t_fd.meta;
    let flux = meta.require_flux()?;
    let se2 = meta.electronic_variance;
    let cols = t_fd.cols();
    let mut out = t_fd.data.as_standard_layout().into_owned();
    let len = frame_len(&out);
    let slice = out.as_slice_mut().expect("standard layout");
    par::for_each_chunk_mut(slice, len, |f, frame| {
        let mut rng = rng::stream(seed, f as u64);
        let ma = meta.tube_current[f];
        for (k, v) in frame.iter_mut().enumerate() {
            let var = low_dose_added_variance(*v, alpha, ma * flux[k % cols], se2);
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            *v += var.sqrt() * z;
        }
    });
    let mut meta = meta.clone();
    for m in &mut meta.tube_current {
        *m *= alpha;
    }
    meta.dose_fraction *= alpha;
    Ok(TransmissionStack { data: out, meta })
}

/// Bell-shaped bowtie flux profile parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bowtie {
    /// Peak photons per mA.
    pub f_max: f64,
    /// Width as a fraction of the detector length.
    pub width: f64,
}

impl Default for Bowtie {
    fn default() -> Self {
        Self { f_max: 2e3, width: 0.35 }
    }
}

pub fn bowtie_flux_profile(n_cols: usize, ma: f64, bowtie: Bowtie) -> Vec<f64> {
    let c = (n_cols as f64 - 1.0) / 2.0;
    let w = bowtie.width * n_cols as f64;
    (0..n_cols)
        .map(|i| {
            let u = (i as f64 - c) / w;
            ma * bowtie.f_max * (-u * u).exp()
        })
        .collect()
}
