//! Denoising networks on the shared bias-free convolution engine.
//!
//! * [`N2ntdNet`]: blind time-distributed model. A shared feature CNN runs on
//!   the `k` frames before and the `k` frames after the target, a forward and
//!   a backward ConvLSTM summarise each side, squeeze-excitation gates weight
//!   the two summaries, and a small head emits `(μx, σx²)`.
//! * [`BlindSpotNet`]: four-rotation blind-spot network on a single frame.
//! * [`Noise2CleanNet`] and [`Half2HalfNet`]: plain residual / direct CNNs.

mod blindspot;
mod n2ntd;
mod trunk;

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sinodenoise_nn::params::he_uniform;
use sinodenoise_nn::{Binder, ParamId, ParamStore, Shape, Tensor, Var};

pub use blindspot::BlindSpotNet;
pub use n2ntd::{convlstm_step, ConvLstmState, N2ntdNet};
pub use trunk::{Half2HalfNet, Noise2CleanNet, Trunk};

use crate::error::{validation, Result};
use crate::rng;

pub const KERNEL: usize = 3;
/// Floor added to every predicted variance.
pub const VARIANCE_FLOOR: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Frames on each side of the target.
    pub k: usize,
    /// Convolution + ReLU layers of the feature extractor / trunk.
    pub depth: usize,
    pub channels: usize,
    pub lstm_channels: usize,
    /// Convolutions in the fusion head, the last one emitting 2 channels.
    pub head_depth: usize,
    /// Squeeze-excitation bottleneck is `channels / se_reduction` wide.
    pub se_reduction: usize,
    /// Transmission heads give `σx² = base² · variance_scale · softplus(z) + 1e-8`
    /// (a relative prior variance); other heads drop the `base²` factor.
    pub variance_scale: f32,
    /// Gain applied to the projection-domain noise level (at most 1) that
    /// fills the noise-map channel.
    pub noise_map_gain: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            k: 3,
            depth: 8,
            channels: 64,
            lstm_channels: 64,
            head_depth: 3,
            se_reduction: 4,
            variance_scale: 1e-4,
            noise_map_gain: 10.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(validation("window half-width k must be at least 1"));
        }
        if self.depth < 1 || self.channels < 1 || self.lstm_channels < 1 {
            return Err(validation("network depth and widths must be positive"));
        }
        if self.head_depth < 1 || self.se_reduction < 1 {
            return Err(validation("head depth and SE reduction must be positive"));
        }
        if !(self.variance_scale > 0.0) {
            return Err(validation("variance scale must be positive"));
        }
        Ok(())
    }
}

/// Output activation for `μx`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanActivation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    N2ntd,
    BlindSpot4r,
    Noise2Clean,
    Half2Half,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::N2ntd => "n2ntd",
            Architecture::BlindSpot4r => "blindspot_4r",
            Architecture::Noise2Clean => "noise2clean",
            Architecture::Half2Half => "half2half",
        })
    }
}

/// Network predictions of the clean-signal distribution.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars<'g> {
    pub mu: Var<'g>,
    pub sigma_x2: Var<'g>,
}

/// Plain-tensor version of [`PosteriorVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMaps {
    pub mu_x: Tensor,
    pub sigma_x2: Tensor,
}

impl<'g> PosteriorVars<'g> {
    pub fn to_maps(&self) -> PosteriorMaps {
        PosteriorMaps {
            mu_x: (*self.mu.value()).clone(),
            sigma_x2: (*self.sigma_x2.value()).clone(),
        }
    }
}

/// Registers conv weights in a store with a seeded initialiser.
pub(crate) struct Builder {
    pub store: ParamStore,
    rng: rng::StreamRng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: rng::stream(rng::derive(seed, "network-init"), 0),
        }
    }

    /// He-uniform weight scaled by `gain`.
    pub fn conv(&mut self, name: &str, shape: Shape, gain: f32) -> ParamId {
        let mut t = he_uniform(shape, &mut self.rng);
        if gain != 1.0 {
            t = t.map(|v| v * gain);
        }
        self.store.add(format!("{name}.weight"), t)
    }

    /// Uniform weight with an explicit bound.
    pub fn uniform(&mut self, name: &str, shape: Shape, bound: f32) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(format!("{name}.weight"), Tensor::from_vec(shape, data))
    }
}

/// `variance_scale · softplus(z) + floor`, strictly positive.
pub(crate) fn variance_head<'g>(z: Var<'g>, scale: f32) -> Var<'g> {
    z.softplus().scale(scale).add_scalar(VARIANCE_FLOOR)
}

/// Posterior head for transmission-domain networks: the prediction is a
/// relative correction of `base`, `μ = relu(base·(1 + z₀))`, with
/// `σx² = base²·scale·softplus(z₁) + floor`. Since `T = exp(−p)`, a relative
/// correction of the transmission is an additive one of the projection, so
/// dark pixels keep the relative accuracy of `base`.
pub(crate) fn relative_head<'g>(z: Var<'g>, base: Var<'g>, scale: f32) -> PosteriorVars<'g> {
    let mu = z.narrow_channels(0, 1).add_scalar(1.0).mul(base).relu();
    let rel = z.narrow_channels(1, 1).softplus().scale(scale);
    PosteriorVars {
        mu,
        sigma_x2: rel.mul(base.mul(base)).add_scalar(VARIANCE_FLOOR),
    }
}

pub(crate) fn check_frames(frames: &[Var<'_>], what: &str) -> Result<Shape> {
    let Some(first) = frames.first() else {
        return Err(validation(format!("{what}: no frames")));
    };
    let s = first.shape();
    if s[1] != 1 {
        return Err(validation(format!("{what}: frames must have one channel, got {}", s[1])));
    }
    if frames.iter().any(|f| f.shape() != s) {
        return Err(validation(format!("{what}: frames differ in shape")));
    }
    Ok(s)
}

/// Any trained network, for checkpoint I/O.
#[derive(Clone, Debug)]
pub enum Network {
    N2ntd(N2ntdNet),
    BlindSpot4r(BlindSpotNet),
    Noise2Clean(Noise2CleanNet),
    Half2Half(Half2HalfNet),
}

impl Network {
    pub fn new(arch: Architecture, cfg: &NetConfig, mean: MeanActivation, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(match arch {
            Architecture::N2ntd => Network::N2ntd(N2ntdNet::new(cfg, mean, seed)),
            Architecture::BlindSpot4r => Network::BlindSpot4r(BlindSpotNet::new(cfg, seed)),
            Architecture::Noise2Clean => Network::Noise2Clean(Noise2CleanNet::new(cfg, seed)),
            Architecture::Half2Half => Network::Half2Half(Half2HalfNet::new(cfg, seed)),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Network::N2ntd(_) => Architecture::N2ntd,
            Network::BlindSpot4r(_) => Architecture::BlindSpot4r,
            Network::Noise2Clean(_) => Architecture::Noise2Clean,
            Network::Half2Half(_) => Architecture::Half2Half,
        }
    }

    pub fn config(&self) -> &NetConfig {
        match self {
            Network::N2ntd(n) => &n.cfg,
            Network::BlindSpot4r(n) => &n.cfg,
            Network::Noise2Clean(n) => &n.cfg,
            Network::Half2Half(n) => &n.cfg,
        }
    }

    pub fn mean_activation(&self) -> MeanActivation {
        match self {
            Network::N2ntd(n) => n.mean_activation,
            _ => MeanActivation::Relu,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Network::N2ntd(n) => &n.params,
            Network::BlindSpot4r(n) => &n.params,
            Network::Noise2Clean(n) => &n.params,
            Network::Half2Half(n) => &n.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Network::N2ntd(n) => &mut n.params,
            Network::BlindSpot4r(n) => &mut n.params,
            Network::Noise2Clean(n) => &mut n.params,
            Network::Half2Half(n) => &mut n.params,
        }
    }

    /// Save weights with a manifest recording architecture, configuration
    /// and caller metadata.
    pub fn save(&self, dir: &Path, seed: u64, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "architecture": self.architecture(),
            "config": self.config(),
            "mean_activation": self.mean_activation(),
            "seed": seed,
            "parameter_count": self.params().numel(),
            "extra": extra,
        });
        self.params().save(dir, meta)?;
        Ok(())
    }

    /// Load a checkpoint; returns the network and the caller metadata.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(dir)?;
        let arch: Architecture = serde_json::from_value(meta["architecture"].clone())
            .map_err(|e| validation(format!("{}: unknown architecture ({e})", dir.display())))?;
        let cfg: NetConfig = serde_json::from_value(meta["config"].clone())?;
        let mean: MeanActivation = serde_json::from_value(meta["mean_activation"].clone())?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut net = Network::new(arch, &cfg, mean, seed)?;
        net.params_mut().assign_from(&store)?;
        Ok((net, meta["extra"].clone()))
    }
}

/// Bind all parameters of `store` for one forward pass.
pub fn bind<'g>(graph: &'g sinodenoise_nn::Graph, store: &'g ParamStore, trainable: bool) -> Binder<'g> {
    Binder::new(graph, store, trainable)
}
