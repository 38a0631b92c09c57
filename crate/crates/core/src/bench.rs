//! The synthetic tomography bench: a multi-row parallel-beam scan of the
//! 3-D Shepp-Logan phantom with a bowtie flux profile and sinusoidal tube
//! current modulation.

use serde::{Deserialize, Serialize};

use crate::ct_physics::{
    bowtie_flux_profile, projection_to_transmission, simulate_low_dose, simulate_measurement, Bowtie,
    ProjectionStack, TransmissionStack,
};
use crate::error::{validation, Result};
use crate::rng;
use crate::tomo_sim::{
    make_sequence_dataset, shepp_logan_slices, sinusoidal_schedule, PhantomImage, ScanGeometry, SequenceSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub phantom_size: usize,
    pub n_angles: usize,
    pub n_detector_cols: usize,
    /// Axial slices, one per detector row.
    pub detector_rows: usize,
    /// Slices are spread evenly over `[-z_extent, z_extent]`.
    pub z_extent: f64,
    /// Physical width of the phantom grid; sets the attenuation scale.
    pub field_of_view: f64,
    pub bowtie: Bowtie,
    pub ma_low: f64,
    pub ma_high: f64,
    pub ma_periods: f64,
    /// Electronic noise variance, photons².
    pub sigma_e2: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            phantom_size: 256,
            n_angles: 360,
            n_detector_cols: 368,
            detector_rows: 32,
            z_extent: 0.25,
            field_of_view: 23.0,
            bowtie: Bowtie::default(),
            ma_low: 50.0,
            ma_high: 400.0,
            ma_periods: 2.0,
            sigma_e2: 25.0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.detector_rows < 1 || self.n_angles < 1 {
            return Err(validation("bench needs at least one row and one angle"));
        }
        if !(self.field_of_view > 0.0 && self.ma_low > 0.0 && self.ma_high >= self.ma_low) {
            return Err(validation("bench field of view and currents must be positive, ma_high ≥ ma_low"));
        }
        if !(self.sigma_e2 >= 0.0) {
            return Err(validation("sigma_e2 must be nonnegative"));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> f64 {
        self.field_of_view / self.phantom_size as f64
    }

    pub fn geometry(&self) -> Result<ScanGeometry> {
        ScanGeometry::parallel(self.n_angles, self.n_detector_cols, self.pixel_size())
    }

    pub fn slice_heights(&self) -> Vec<f64> {
        let r = self.detector_rows;
        if r == 1 {
            return vec![0.0];
        }
        (0..r)
            .map(|i| -self.z_extent + 2.0 * self.z_extent * i as f64 / (r - 1) as f64)
            .collect()
    }

    pub fn phantom(&self, variant: u64) -> Result<Vec<PhantomImage>> {
        let ps = self.pixel_size();
        Ok(shepp_logan_slices(self.phantom_size, &self.slice_heights(), variant)?
            .into_iter()
            .map(|mut s| {
                s.pixel_size = ps;
                s
            })
            .collect())
    }

    pub fn flux_per_ma(&self) -> Vec<f64> {
        bowtie_flux_profile(self.n_detector_cols, 1.0, self.bowtie)
    }

    pub fn ma_schedule(&self) -> Vec<f64> {
        sinusoidal_schedule(self.n_angles, self.ma_low, self.ma_high, self.ma_periods)
    }
}

/// Clean projections, one full-dose measurement, and low-dose versions of
/// it for each requested dose fraction.
#[derive(Clone, Debug)]
pub struct BenchSet {
    pub clean: ProjectionStack,
    pub full: TransmissionStack,
    pub low: Vec<(f64, TransmissionStack)>,
}

impl BenchSet {
    pub fn low_dose(&self, alpha: f64) -> Option<&TransmissionStack> {
        self.low.iter().find(|(a, _)| (a - alpha).abs() < 1e-12).map(|(_, t)| t)
    }
}

/// Simulate one phantom variant. Low-dose stacks are drawn from the
/// full-dose measurement, as a dose-reduction study would.
pub fn simulate_set(cfg: &BenchConfig, variant: u64, alphas: &[f64], seed: u64) -> Result<BenchSet> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let phantoms = cfg.phantom(variant)?;
    let (clean, full, _) = make_sequence_dataset(&SequenceSpec {
        phantoms: &phantoms,
        geom: &geom,
        flux_per_ma: cfg.flux_per_ma(),
        ma_schedule: cfg.ma_schedule(),
        sigma_e2: cfg.sigma_e2,
        alpha: 1.0,
        seed: rng::derive(seed, &format!("full/{variant}")),
    })?;
    let low = alphas
        .iter()
        .map(|&a| Ok((a, simulate_low_dose(&full, a, rng::derive(seed, &format!("low/{variant}/{a}")))?)))
        .collect::<Result<_>>()?;
    Ok(BenchSet { clean, full, low })
}

/// Noise-free transmissions of the clean projections.
pub fn clean_transmission(clean: &ProjectionStack) -> Result<TransmissionStack> {
    projection_to_transmission(clean)
}

/// A fresh measurement of the clean stack at dose fraction `alpha`,
/// without the intermediate full-dose draw.
pub fn direct_measurement(clean: &ProjectionStack, alpha: f64, seed: u64) -> Result<TransmissionStack> {
    let mut t = projection_to_transmission(clean)?;
    t.meta.tube_current.iter_mut().for_each(|m| *m *= alpha);
    t.meta.dose_fraction = alpha;
    simulate_measurement(&t, seed)
}
