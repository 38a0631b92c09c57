//! Experiment configuration (TOML). Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{validation, Error, Result};
use crate::networks::NetConfig;
use crate::training::{Regime, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Every `heldout_every`-th distinct current (sorted) is held out.
    pub heldout_every: usize,
    /// Held-out RMSRE above this percentage fails the command (exit 3).
    pub rmsre_gate: f64,
    /// Distinct currents used for the fit; 0 keeps all.
    pub max_currents: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 1000,
            learning_rate: 1e-2,
            heldout_every: 5,
            rmsre_gate: 2.0,
            max_currents: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub plots: bool,
    /// Frames shown in projection panels.
    pub plot_frames: Vec<usize>,
    /// When set, `evaluate` exits 3 if n2ntd_anm gains less PSNR than this
    /// over the noisy input at any matched dose.
    pub min_psnr_gain_db: Option<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            plots: true,
            plot_frames: vec![90],
            min_psnr_gain_db: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossTestConfig {
    pub train_alphas: Vec<f64>,
    pub test_alphas: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub plots: bool,
}

impl Default for CrossTestConfig {
    fn default() -> Self {
        Self {
            train_alphas: vec![0.25, 0.05],
            test_alphas: vec![0.25, 0.1, 0.05],
            regimes: vec![
                Regime::N2ntdAnm,
                Regime::Noise2Void4r,
                Regime::Noise2Clean,
                Regime::N2ntdMseAblation,
            ],
            plots: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dose fractions simulated for every split.
    pub alphas: Vec<f64>,
    /// Phantom variant per split.
    pub train_variant: u64,
    pub test_variant: u64,
    /// Regimes trained by `train` and evaluated by `evaluate`.
    pub regimes: Vec<Regime>,
    /// Dose fractions models are trained at.
    pub train_alphas: Vec<f64>,
    /// Frames per forward pass during denoising.
    pub batch_frames: usize,
    pub bench: BenchConfig,
    pub noise: NoiseConfig,
    pub network: NetConfig,
    pub train: TrainConfig,
    /// Per-regime changes to `[train]`, e.g. `[train_overrides.noise2clean]`.
    pub train_overrides: BTreeMap<Regime, TrainOverride>,
    pub evaluate: EvaluateConfig,
    pub cross_test: CrossTestConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/bench"),
            alphas: vec![0.25, 0.1, 0.05],
            train_variant: 1,
            test_variant: 2,
            regimes: vec![
                Regime::N2ntdAnm,
                Regime::Noise2Void4r,
                Regime::Half2Half,
                Regime::Noise2Clean,
            ],
            train_alphas: vec![0.25],
            batch_frames: 4,
            bench: BenchConfig::default(),
            noise: NoiseConfig::default(),
            network: NetConfig::default(),
            train: TrainConfig {
                patch_size: 32,
                ..TrainConfig::default()
            },
            train_overrides: BTreeMap::new(),
            evaluate: EvaluateConfig::default(),
            cross_test: CrossTestConfig::default(),
        }
    }
}

fn check_alphas(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Config(format!("{name} must lie in (0, 1)")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_alphas("alphas", &self.alphas)?;
        check_alphas("train_alphas", &self.train_alphas)?;
        check_alphas("cross_test.train_alphas", &self.cross_test.train_alphas)?;
        check_alphas("cross_test.test_alphas", &self.cross_test.test_alphas)?;
        for a in self.train_alphas.iter().chain(&self.cross_test.train_alphas).chain(&self.cross_test.test_alphas) {
            if !self.alphas.iter().any(|b| (a - b).abs() < 1e-12) {
                return Err(Error::Config(format!("dose fraction {a} is not in the simulated alphas")));
            }
        }
        if self.train_variant == self.test_variant {
            return Err(Error::Config("train and test phantom variants must differ".into()));
        }
        if self.batch_frames == 0 || self.noise.heldout_every < 2 || self.noise.hidden == 0 {
            return Err(Error::Config(
                "batch_frames and noise.hidden must be positive, noise.heldout_every ≥ 2".into(),
            ));
        }
        self.bench.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.network.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        for &r in self.train_overrides.keys() {
            self.train_for(r, 0).validate().map_err(|e| Error::Config(format!("train_overrides.{r}: {e}")))?;
        }
        if self.train.patch_size > self.bench.detector_rows || self.train.patch_size > self.bench.n_detector_cols {
            return Err(Error::Config(format!(
                "patch_size {} exceeds the {}x{} detector",
                self.train.patch_size, self.bench.detector_rows, self.bench.n_detector_cols
            )));
        }
        Ok(())
    }

    /// Training settings for one regime.
    pub fn train_for(&self, regime: Regime, seed: u64) -> TrainConfig {
        let mut t = TrainConfig {
            regime,
            seed,
            ..self.train.clone()
        };
        if let Some(o) = self.train_overrides.get(&regime) {
            t.learning_rate = o.learning_rate.unwrap_or(t.learning_rate);
            t.batch_size = o.batch_size.or(t.batch_size);
            t.max_epochs = o.max_epochs.unwrap_or(t.max_epochs);
            t.steps_per_epoch = o.steps_per_epoch.unwrap_or(t.steps_per_epoch);
        }
        t
    }
}

/// Short tag for a dose fraction in paths, e.g. `a0.25`.
pub fn alpha_tag(alpha: f64) -> String {
    format!("a{alpha}")
}

pub(crate) fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(validation(format!("{what} not found at {}", path.display())));
    }
    Ok(())
}
