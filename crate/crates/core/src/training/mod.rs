//! Losses, Half2Half pair generation, patch sampling and the training loop
//! for every regime.

pub mod data;
mod loss;

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sinodenoise_nn::{Adam, Binder, Graph, ParamStore, Tensor, Var};

pub use data::{
    gather, gather_window, half2half_pair, lambda_patches, FrameData, NoiseLevels, PatchIndex, PatchSampler,
};
pub use loss::{mse_loss, nll_anm_pixel, nll_loss, nll_loss_grad, nll_pixel, NllGrads};

use crate::ct_physics::{ProjectionStack, TransmissionStack};
use crate::error::{validation, Error, Result};
use crate::networks::{bind, Architecture, MeanActivation, Network};
use crate::noise_model::{FrozenFlags, NoiseAdam, NoiseGrads, NoiseModelParams};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    N2ntdAnm,
    #[serde(rename = "noise2void_4r")]
    Noise2Void4r,
    #[serde(rename = "half2half")]
    Half2Half,
    #[serde(rename = "noise2clean")]
    Noise2Clean,
    N2ntdMseAblation,
    /// N2NTD with one learned `λ` shared by every column and current.
    N2ntdLambdaConst,
}

/// Which data a regime feeds to its network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputDomain {
    Transmission,
    Projection,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::N2ntdAnm,
        Regime::Noise2Void4r,
        Regime::Half2Half,
        Regime::Noise2Clean,
        Regime::N2ntdMseAblation,
        Regime::N2ntdLambdaConst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::N2ntdAnm => "n2ntd_anm",
            Regime::Noise2Void4r => "noise2void_4r",
            Regime::Half2Half => "half2half",
            Regime::Noise2Clean => "noise2clean",
            Regime::N2ntdMseAblation => "n2ntd_mse_ablation",
            Regime::N2ntdLambdaConst => "n2ntd_lambda_const",
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Regime::N2ntdAnm | Regime::N2ntdMseAblation | Regime::N2ntdLambdaConst => Architecture::N2ntd,
            Regime::Noise2Void4r => Architecture::BlindSpot4r,
            Regime::Half2Half => Architecture::Half2Half,
            Regime::Noise2Clean => Architecture::Noise2Clean,
        }
    }

    pub fn mean_activation(self) -> MeanActivation {
        match self {
            Regime::N2ntdMseAblation => MeanActivation::Identity,
            _ => MeanActivation::Relu,
        }
    }

    pub fn input_domain(self) -> InputDomain {
        match self {
            Regime::Noise2Clean | Regime::N2ntdMseAblation => InputDomain::Projection,
            _ => InputDomain::Transmission,
        }
    }

    /// Trained with the Gaussian NLL and a noise model.
    pub fn uses_nll(self) -> bool {
        matches!(self, Regime::N2ntdAnm | Regime::Noise2Void4r | Regime::N2ntdLambdaConst)
    }

    /// Combined with the noisy pixel by the posterior mean at inference.
    pub fn uses_posterior_mean(self) -> bool {
        self.uses_nll()
    }

    pub fn supervised(self) -> bool {
        self == Regime::Noise2Clean
    }

    /// Window half-width the regime needs; single-frame regimes use 0.
    pub fn window(self, k: usize) -> usize {
        match self.architecture() {
            Architecture::N2ntd | Architecture::Noise2Clean => k,
            _ => 0,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    /// Defaults to 64 for supervised and 16 for self-supervised regimes.
    pub batch_size: Option<usize>,
    pub patch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub plateau_patience: usize,
    /// Relative validation-loss decrease that counts as an improvement.
    pub plateau_tolerance: f64,
    pub seed: u64,
    pub freeze_noise_layers: bool,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    /// Every `validation_stride`-th frame is held out as a target.
    pub validation_stride: usize,
    pub validation_patches: usize,
    /// Border pixels excluded from every loss.
    pub loss_margin: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::N2ntdAnm,
            learning_rate: 1e-4,
            batch_size: None,
            patch_size: 64,
            plateau_patience: 10,
            plateau_tolerance: 1e-3,
            seed: 0,
            freeze_noise_layers: true,
            max_epochs: 200,
            steps_per_epoch: 100,
            validation_stride: 20,
            validation_patches: 64,
            loss_margin: 4,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size
            .unwrap_or(if self.regime.supervised() { 64 } else { 16 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size() < 1 {
            return Err(validation("batch_size must be at least 1"));
        }
        if self.patch_size < 16 {
            return Err(validation(format!("patch_size must be at least 16, got {}", self.patch_size)));
        }
        if 2 * self.loss_margin >= self.patch_size {
            return Err(validation("loss margin leaves no pixels in a patch"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(validation("learning_rate must be positive"));
        }
        if self.validation_stride < 2 || self.validation_patches < 1 || self.steps_per_epoch < 1 {
            return Err(validation(
                "validation_stride must be ≥ 2, validation_patches and steps_per_epoch ≥ 1",
            ));
        }
        if !(self.plateau_tolerance >= 0.0) {
            return Err(validation("plateau_tolerance must be nonnegative"));
        }
        Ok(())
    }
}

/// Training data for one run.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    /// Low-dose measured transmissions.
    pub noisy: &'a TransmissionStack,
    /// Noise-free projections, required by supervised regimes.
    pub clean: Option<&'a ProjectionStack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Noise model after training (σe² may have moved), for NLL regimes.
    pub noise_model: Option<NoiseModelParams>,
    pub log: Vec<EpochRecord>,
    pub stopped_on_plateau: bool,
}

/// Inputs and targets prepared once per run.
struct Prepared {
    input: FrameData,
    /// MSE target; `None` means the centre input frame.
    target: Option<FrameData>,
    /// Fixed noise levels for the Noise2Clean noise map.
    levels: Option<NoiseLevels>,
    tube_current: Vec<f64>,
    k: usize,
    patch: usize,
    margin: usize,
    noise_map_gain: f32,
}

/// Side gradients of a batch for the noise model.
struct SideGrads {
    per_sample: Vec<(PatchIndex, Vec<f64>)>,
    sigma_e2: f64,
}

fn prepare(regime: Regime, data: &TrainData, net: &Network, noise: Option<&NoiseModelParams>, cfg: &TrainConfig) -> Result<Prepared> {
    let t = &data.noisy.data;
    let k = regime.window(net.config().k);
    let mut levels = None;
    let (input, target) = match regime {
        Regime::N2ntdAnm | Regime::Noise2Void4r | Regime::N2ntdLambdaConst => (FrameData::from_array(t), None),
        Regime::N2ntdMseAblation => (FrameData::projection_of(t), None),
        Regime::Half2Half => {
            let (a, b) = half2half_pair(data.noisy, rng::derive(cfg.seed, "half2half"))?;
            (FrameData::from_array(&a.data), Some(FrameData::from_array(&b.data)))
        }
        Regime::Noise2Clean => {
            let Some(clean) = data.clean else {
                return Err(validation("noise2clean needs clean projections"));
            };
            let target = FrameData::from_array(&clean.data);
            let input = FrameData::projection_of(t);
            data::check_frames_match(&input, &target)?;
            levels = Some(match noise {
                Some(m) => NoiseLevels::from_model(m, &data.noisy.meta)?,
                None => NoiseLevels::from_meta(&data.noisy.meta)?,
            });
            (input, Some(target))
        }
    };
    Ok(Prepared {
        input,
        target,
        levels,
        tube_current: data.noisy.meta.tube_current.clone(),
        k,
        patch: cfg.patch_size,
        margin: cfg.loss_margin,
        noise_map_gain: net.config().noise_map_gain,
    })
}

/// Loss mask for a batch of crops: pixels within `margin` of a crop edge
/// are dropped unless that edge is also the frame edge, where the zero
/// padding seen in training matches full-frame inference.
fn loss_mask(idx: &[PatchIndex], p: usize, margin: usize, rows: usize, cols: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(idx.len() * p * p);
    for ix in idx {
        let top = if ix.row == 0 { 0 } else { margin };
        let left = if ix.col == 0 { 0 } else { margin };
        let bottom = if ix.row + p == rows { p } else { p - margin };
        let right = if ix.col + p == cols { p } else { p - margin };
        for y in 0..p {
            out.extend((0..p).map(|x| y >= top && y < bottom && x >= left && x < right));
        }
    }
    out
}

/// Projection-domain noise level times `gain` for crops of noisy
/// projections, using the noisy transmission as the signal mean.
fn noise_map(levels: &NoiseLevels, center_projection: &Tensor, idx: &[PatchIndex], p: usize, gain: f32) -> Tensor {
    let mut out = center_projection.clone();
    for (b, ix) in idx.iter().enumerate() {
        let plane = &mut out.data_mut()[b * p * p..(b + 1) * p * p];
        for (j, v) in plane.iter_mut().enumerate() {
            let t = (-(*v as f64)).exp();
            *v = levels.projection_sigma(t, ix.frame, ix.col + j % p) as f32 * gain;
        }
    }
    out
}

/// Masked mean NLL with `σn²` from per-pixel `λ`, as a graph node over
/// `(μx, σx²)`. Returns the node and the noise-model side gradients.
fn anm_nll<'g>(
    mu: Var<'g>,
    sigma_x2: Var<'g>,
    y: &Tensor,
    lambda: &[f64],
    sigma_e2: f64,
    mask: &[bool],
) -> Result<(Var<'g>, Vec<f64>, f64)> {
    let m = mu.value();
    let s = sigma_x2.value();
    if m.shape() != y.shape() || s.shape() != y.shape() || lambda.len() != y.numel() {
        return Err(validation("NLL inputs differ in shape"));
    }
    if mask.len() != y.numel() {
        return Err(validation("NLL mask differs in shape"));
    }
    let count = mask.iter().filter(|&&v| v).count();
    let inv = 1.0 / count as f64;
    let mut d_mu = Tensor::zeros(y.shape());
    let mut d_s = Tensor::zeros(y.shape());
    let mut d_lambda = vec![0.0; y.numel()];
    let (mut total, mut d_se2) = (0.0, 0.0);
    for i in 0..y.numel() {
        if !mask[i] {
            continue;
        }
        let (yv, mv, sv) = (y.data()[i] as f64, m.data()[i] as f64, s.data()[i] as f64);
        if !(yv.is_finite() && mv.is_finite() && sv.is_finite()) {
            // Surfaces as a non-finite loss, which aborts training with the batch saved.
            total = f64::NAN;
            continue;
        }
        let (l, g) = nll_anm_pixel(
            yv,
            mv,
            sv,
            lambda[i],
            sigma_e2,
        )?;
        total += l;
        d_mu.data_mut()[i] = (g[0] * inv) as f32;
        d_s.data_mut()[i] = (g[1] * inv) as f32;
        d_lambda[i] = g[2] * inv;
        d_se2 += g[3] * inv;
    }
    let (d_mu, d_s) = (Rc::new(d_mu), Rc::new(d_s));
    let node = mu.graph().op(
        &[mu, sigma_x2],
        Tensor::scalar((total * inv) as f32),
        Box::new(move |g, _, _| {
            let k = g.item();
            vec![Some(d_mu.map(|v| v * k)), Some(d_s.map(|v| v * k))]
        }),
    );
    Ok((node, d_lambda, d_se2))
}

impl Prepared {
    fn batch_loss<'g>(
        &self,
        regime: Regime,
        net: &Network,
        b: &Binder<'g>,
        idx: &[PatchIndex],
        noise: Option<&NoiseModelParams>,
    ) -> Result<(Var<'g>, Option<SideGrads>)> {
        let g = b.graph();
        let p = self.patch;
        let center = gather(&self.input, idx, 0, p);
        let mask = loss_mask(idx, p, self.margin, self.input.rows, self.input.cols);
        let k = self.k;
        let window = || {
            let (past, future) = gather_window(&self.input, idx, k, p);
            (
                past.into_iter().map(|t| g.constant(t)).collect::<Vec<_>>(),
                future.into_iter().map(|t| g.constant(t)).collect::<Vec<_>>(),
            )
        };
        let target = || match &self.target {
            Some(t) => gather(t, idx, 0, p),
            None => center.clone(),
        };
        let posterior = match (regime, net) {
            (Regime::N2ntdAnm | Regime::N2ntdLambdaConst, Network::N2ntd(n)) => {
                let (past, future) = window();
                Some(n.forward(b, &past, &future)?)
            }
            (Regime::Noise2Void4r, Network::BlindSpot4r(n)) => Some(n.forward(b, g.constant(center.clone()))?),
            _ => None,
        };
        if let Some(post) = posterior {
            let noise = noise.ok_or_else(|| validation(format!("{regime} needs a noise model")))?;
            let mut lambda = Vec::with_capacity(center.numel());
            let mut profiles = Vec::with_capacity(idx.len());
            for ix in idx {
                let prof = noise.predict_flux_profile(self.tube_current[ix.frame])?;
                let row = &prof[ix.col..ix.col + p];
                for _ in 0..p {
                    lambda.extend_from_slice(row);
                }
                profiles.push(prof);
            }
            let (loss, d_lambda, d_se2) =
                anm_nll(post.mu, post.sigma_x2, &center, &lambda, noise.sigma_e2(), &mask)?;
            let per_sample = idx
                .iter()
                .enumerate()
                .map(|(s, ix)| {
                    let mut cols = vec![0.0; p];
                    for (j, d) in d_lambda[s * p * p..(s + 1) * p * p].iter().enumerate() {
                        cols[j % p] += d;
                    }
                    (*ix, cols)
                })
                .collect();
            return Ok((
                loss,
                Some(SideGrads {
                    per_sample,
                    sigma_e2: d_se2,
                }),
            ));
        }
        let pred = match (regime, net) {
            (Regime::N2ntdMseAblation, Network::N2ntd(n)) => {
                let (past, future) = window();
                n.forward(b, &past, &future)?.mu
            }
            (Regime::Half2Half, Network::Half2Half(n)) => n.forward(b, g.constant(center.clone()))?,
            (Regime::Noise2Clean, Network::Noise2Clean(n)) => {
                let (past, future) = window();
                let neighbours: Vec<Var> = past.into_iter().chain(future).collect();
                let levels = self.levels.as_ref().expect("prepared with levels");
                let map = noise_map(levels, &center, idx, p, self.noise_map_gain);
                n.forward(b, g.constant(center.clone()), &neighbours, Some(g.constant(map)))?
            }
            _ => {
                return Err(validation(format!(
                    "regime {regime} does not train a {} network",
                    net.architecture()
                )))
            }
        };
        Ok((pred.mse_where(&target(), &mask), None))
    }
}

fn check_regime(regime: Regime, net: &Network) -> Result<()> {
    if net.architecture() != regime.architecture() || net.mean_activation() != regime.mean_activation() {
        return Err(validation(format!(
            "regime {regime} needs a {} network with {:?} mean, got {} with {:?}",
            regime.architecture(),
            regime.mean_activation(),
            net.architecture(),
            net.mean_activation()
        )));
    }
    Ok(())
}

/// Noise model for a regime: the pre-estimated one with frozen `λ` layers,
/// or a single learned constant for the λ-const ablation.
pub fn regime_noise_model(
    regime: Regime,
    fitted: Option<&NoiseModelParams>,
    noisy: &TransmissionStack,
    freeze: bool,
) -> Result<Option<NoiseModelParams>> {
    if !regime.uses_nll() {
        return Ok(fitted.cloned());
    }
    let levels = match fitted {
        Some(m) => NoiseLevels::from_model(m, &noisy.meta)?,
        None if regime == Regime::N2ntdLambdaConst => NoiseLevels::from_meta(&noisy.meta)?,
        None => return Err(validation(format!("{regime} needs a pre-estimated noise model"))),
    };
    if regime != Regime::N2ntdLambdaConst {
        let mut m = fitted.expect("checked above").clone();
        m.frozen = FrozenFlags {
            embedding: freeze,
            current_maps: freeze,
        };
        return Ok(Some(m));
    }
    let all: Vec<f64> = levels.lambda.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let mut m = NoiseModelParams::constant(noisy.cols(), fitted.map_or(16, |f| f.hidden()), 1.0, levels.sigma_e2);
    m.flux_scale = mean;
    m.frozen = FrozenFlags {
        embedding: true,
        current_maps: false,
    };
    Ok(Some(m))
}

fn save_batch(dir: &Path, prepared: &Prepared, idx: &[PatchIndex]) -> Result<()> {
    let mut store = ParamStore::new();
    let k = prepared.k as isize;
    for off in -k..=k {
        store.add(format!("frame{off:+}"), gather(&prepared.input, idx, off, prepared.patch));
    }
    let meta = serde_json::json!({
        "indices": idx.iter().map(|i| [i.frame, i.row, i.col]).collect::<Vec<_>>(),
    });
    store.save(&dir.join("nan_batch"), meta)?;
    Ok(())
}

/// Train `net` under `cfg`. Stops after `max_epochs` or when the validation
/// loss has not improved by `plateau_tolerance` for `plateau_patience`
/// epochs. A non-finite loss aborts the run; with `diag_dir` set, the
/// offending batch is written there first.
pub fn train(
    mut net: Network,
    noise_model: Option<NoiseModelParams>,
    data: TrainData,
    cfg: &TrainConfig,
    diag_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let regime = cfg.regime;
    check_regime(regime, &net)?;
    let mut noise = noise_model;
    if regime.uses_nll() && noise.is_none() {
        return Err(validation(format!("{regime} needs a noise model")));
    }
    if let Some(m) = &noise {
        if m.n_cols() != data.noisy.cols() {
            return Err(validation("noise model column count does not match the data"));
        }
    }
    let prepared = prepare(regime, &data, &net, noise.as_ref(), cfg)?;
    let (frames, rows, cols) = (prepared.input.frames, prepared.input.rows, prepared.input.cols);
    let stride = cfg.validation_stride;
    let mut sampler = PatchSampler::new(
        frames,
        rows,
        cols,
        cfg.patch_size,
        prepared.k,
        |f| f % stride != 0,
        rng::derive(cfg.seed, "patches"),
    )?;
    let val_idx = PatchSampler::new(
        frames,
        rows,
        cols,
        cfg.patch_size,
        prepared.k,
        |f| f % stride == 0,
        rng::derive(cfg.seed, "validation"),
    )?
    .batch(cfg.validation_patches);

    let mut adam = Adam::new(net.params(), cfg.learning_rate as f32);
    let mut noise_adam = noise.as_ref().map(|m| NoiseAdam::new(m, cfg.learning_rate, true));
    let batch = cfg.batch_size();
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_on_plateau = false;

    for epoch in 1..=cfg.max_epochs {
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let idx = sampler.batch(batch);
            let g = Graph::new();
            let (grads, side, loss) = {
                let b = bind(&g, net.params(), true);
                let (loss, side) = prepared.batch_loss(regime, &net, &b, &idx, noise.as_ref())?;
                let value = loss.value().item() as f64;
                if !value.is_finite() {
                    if let Some(dir) = diag_dir {
                        save_batch(dir, &prepared, &idx)?;
                    }
                    return Err(Error::NonFinite(format!("{regime} epoch {epoch}: loss {value}")));
                }
                let mut gr = g.backward(loss);
                (b.gradients(&mut gr), side, value)
            };
            adam.step(net.params_mut(), &grads);
            if let (Some(side), Some(m), Some(opt)) = (side, noise.as_mut(), noise_adam.as_mut()) {
                let mut ng = NoiseGrads::zeros_like(m);
                let mut full = vec![0.0; m.n_cols()];
                for (ix, cols) in &side.per_sample {
                    full.fill(0.0);
                    full[ix.col..ix.col + cols.len()].copy_from_slice(cols);
                    m.backward_lambda(prepared.tube_current[ix.frame], &full, &mut ng);
                }
                m.backward_sigma_e2(side.sigma_e2, &mut ng);
                opt.step(m, &ng);
            }
            sum += loss;
        }
        let val_loss = validation_loss(&prepared, regime, &net, &val_idx, batch, noise.as_ref())?;
        let rec = EpochRecord {
            epoch,
            train_loss: sum / cfg.steps_per_epoch as f64,
            val_loss,
            lr: cfg.learning_rate,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{regime} epoch {epoch}: train {:.6e} val {:.6e} ({:.0} s)",
            rec.train_loss,
            rec.val_loss,
            rec.wall_time_s
        );
        log.push(rec);
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("{regime} epoch {epoch}: validation loss {val_loss}")));
        }
        if val_loss < best - cfg.plateau_tolerance * best.abs() || best == f64::INFINITY {
            best = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.plateau_patience {
                stopped_on_plateau = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        network: net,
        noise_model: noise,
        log,
        stopped_on_plateau,
    })
}

fn validation_loss(
    prepared: &Prepared,
    regime: Regime,
    net: &Network,
    idx: &[PatchIndex],
    batch: usize,
    noise: Option<&NoiseModelParams>,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        let g = Graph::new();
        let b = bind(&g, net.params(), false);
        let (loss, _) = prepared.batch_loss(regime, net, &b, chunk, noise)?;
        total += loss.value().item() as f64 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

#[cfg(test)]
mod tests;
