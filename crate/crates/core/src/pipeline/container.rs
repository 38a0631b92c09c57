//! On-disk dataset containers: `meta.json` plus `data.f32` (little-endian
//! `f32`, C order, frames × rows × cols).

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ct_physics::{AcquisitionMeta, ProjectionStack, TransmissionStack};
use crate::error::{validation, Error, Result};

pub const CONTAINER_FORMAT: &str = "sinodenoise-container/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Projection,
    Transmission,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub command: String,
    /// SHA-256 over the command name, its configuration and the seed.
    pub command_hash: String,
    /// Parent containers, relative to the run directory.
    pub parents: Vec<String>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerMeta {
    pub format: String,
    pub shape: [usize; 3],
    pub dtype: String,
    pub domain: DomainTag,
    pub tube_current: Vec<f64>,
    pub flux_per_ma: Option<Vec<f64>>,
    pub dose_fraction: f64,
    pub sigma_e2: f64,
    /// Image pixel size, for image containers.
    pub pixel_size: Option<f64>,
    pub seed: u64,
    pub data_sha256: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: ContainerMeta,
    pub data: Array3<f32>,
}

fn to_bytes(data: &Array3<f32>) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Container {
    fn build(
        domain: DomainTag,
        data: &Array3<f64>,
        meta: Option<&AcquisitionMeta>,
        seed: u64,
        provenance: Provenance,
    ) -> Self {
        let data = data.mapv(|v| v as f32);
        let (f, r, c) = data.dim();
        let unit = AcquisitionMeta::unit(f);
        let m = meta.unwrap_or(&unit);
        Self {
            meta: ContainerMeta {
                format: CONTAINER_FORMAT.into(),
                shape: [f, r, c],
                dtype: "f32".into(),
                domain,
                tube_current: m.tube_current.clone(),
                flux_per_ma: m.flux_per_ma.clone(),
                dose_fraction: m.dose_fraction,
                sigma_e2: m.electronic_variance,
                pixel_size: None,
                seed,
                data_sha256: sha256_hex(&to_bytes(&data)),
                provenance,
            },
            data,
        }
    }

    pub fn from_projection(p: &ProjectionStack, seed: u64, provenance: Provenance) -> Self {
        Self::build(DomainTag::Projection, &p.data, Some(&p.meta), seed, provenance)
    }

    pub fn from_transmission(t: &TransmissionStack, seed: u64, provenance: Provenance) -> Self {
        Self::build(DomainTag::Transmission, &t.data, Some(&t.meta), seed, provenance)
    }

    /// Slices × rows × cols image volume.
    pub fn from_images(data: &Array3<f64>, pixel_size: f64, seed: u64, provenance: Provenance) -> Self {
        let mut c = Self::build(DomainTag::Image, data, None, seed, provenance);
        c.meta.tube_current.clear();
        c.meta.pixel_size = Some(pixel_size);
        c
    }

    pub fn acquisition(&self) -> AcquisitionMeta {
        AcquisitionMeta {
            tube_current: self.meta.tube_current.clone(),
            flux_per_ma: self.meta.flux_per_ma.clone(),
            dose_fraction: self.meta.dose_fraction,
            electronic_variance: self.meta.sigma_e2,
            electronic_mean: 0.0,
        }
    }

    pub fn data_f64(&self) -> Array3<f64> {
        self.data.mapv(|v| v as f64)
    }

    fn expect_domain(&self, d: DomainTag) -> Result<()> {
        if self.meta.domain != d {
            return Err(validation(format!("expected a {d:?} container, found {:?}", self.meta.domain)));
        }
        Ok(())
    }

    pub fn to_projection(&self) -> Result<ProjectionStack> {
        self.expect_domain(DomainTag::Projection)?;
        ProjectionStack::new(self.data_f64(), self.acquisition())
    }

    pub fn to_transmission(&self) -> Result<TransmissionStack> {
        self.expect_domain(DomainTag::Transmission)?;
        TransmissionStack::new(self.data_f64(), self.acquisition())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("data.f32"), to_bytes(&self.data))?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| validation(format!("{}: {e}", meta_path.display())))?;
        let meta: ContainerMeta =
            serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", meta_path.display())))?;
        if meta.format != CONTAINER_FORMAT || meta.dtype != "f32" {
            return Err(validation(format!("{}: unsupported format or dtype", dir.display())));
        }
        let bytes = fs::read(dir.join("data.f32"))?;
        let n: usize = meta.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(validation(format!(
                "{}: data.f32 holds {} bytes, shape {:?} needs {}",
                dir.display(),
                bytes.len(),
                meta.shape,
                n * 4
            )));
        }
        if sha256_hex(&bytes) != meta.data_sha256 {
            return Err(validation(format!("{}: data checksum mismatch", dir.display())));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let [f, r, c] = meta.shape;
        let data = Array3::from_shape_vec((f, r, c), values).expect("checked length");
        let out = Self { meta, data };
        out.check_ranges().map_err(|e| validation(format!("{}: {e}", dir.display())))?;
        if out.meta.domain != DomainTag::Image {
            out.acquisition().validate(f, c)?;
        }
        Ok(out)
    }

    /// Value ranges that the domain tag implies.
    fn check_ranges(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite values".into()));
        }
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let ok = match self.meta.domain {
            DomainTag::Transmission => lo >= -1.0 && hi <= 2.0,
            DomainTag::Projection => lo >= -1.0 && hi <= 20.0,
            DomainTag::Image => true,
        };
        if !ok && !self.data.is_empty() {
            return Err(Error::Validation(format!(
                "values in [{lo}, {hi}] do not fit a {:?} container",
                self.meta.domain
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            command: "test".into(),
            command_hash: "0".into(),
            parents: vec![],
            note: String::new(),
        }
    }

    fn sample() -> TransmissionStack {
        let meta = AcquisitionMeta {
            tube_current: vec![10.0, 20.0],
            flux_per_ma: Some(vec![5.0, 6.0, 7.0]),
            dose_fraction: 0.25,
            electronic_variance: 3.0,
            electronic_mean: 0.0,
        };
        TransmissionStack::new(Array3::from_shape_fn((2, 2, 3), |(a, b, c)| 0.1 * (a + b + c) as f64 + 0.013), meta)
            .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = Container::from_transmission(&sample(), 4, prov());
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Container::read(dir.path()).unwrap();
        assert_eq!(back, c);
        let t = back.to_transmission().unwrap();
        assert_eq!(t.meta, sample().meta);
        assert!(back.to_projection().is_err());
    }

    #[test]
    fn size_mismatch_and_bad_ranges_are_rejected() {
        let c = Container::from_transmission(&sample(), 4, prov());
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let mut bytes = fs::read(dir.path().join("data.f32")).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(dir.path().join("data.f32"), &bytes).unwrap();
        assert!(matches!(Container::read(dir.path()), Err(Error::Validation(_))));

        let mut bad = sample();
        bad.data[[0, 0, 0]] = 7.0;
        let c = Container::from_transmission(&bad, 4, prov());
        c.write(dir.path()).unwrap();
        assert!(matches!(Container::read(dir.path()), Err(Error::Validation(_))));
    }
}
