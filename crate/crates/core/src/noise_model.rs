//! Adaptable noise model: `λ(i, mA) = max(F·(slope(mA)·e(i) + bias(mA)), λ_min)`
//! approximates the incident flux of detector column `i` at tube current
//! `mA`, and a scalar electronic variance `σe²` completes
//! `σn² = μ/λ + σe²/λ²`.
//!
//! The model is small, so it lives in `f64` with hand-written gradients.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sinodenoise_nn::{ParamStore, Tensor};

use crate::error::{domain, validation, Error, Result};
use crate::rng;

pub const LAMBDA_MIN: f64 = 1.0;
pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenFlags {
    pub embedding: bool,
    pub current_maps: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModelParams {
    pub column_embedding: Vec<f64>,
    /// `1 → h` affine map applied to the normalised current.
    pub in_weight: Vec<f64>,
    pub in_bias: Vec<f64>,
    /// `h → 2` affine map producing (slope, bias).
    pub out_weight: [Vec<f64>; 2],
    pub out_bias: [f64; 2],
    /// Currents are divided by this before the first map.
    pub current_scale: f64,
    /// Fixed output scale `F`, so that learned values stay of order one.
    pub flux_scale: f64,
    /// `σe² = softplus(sigma_e2_raw)`.
    pub sigma_e2_raw: f64,
    pub lambda_min: f64,
    pub frozen: FrozenFlags,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y <= 0.0 {
        f64::NEG_INFINITY
    } else if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward intermediates of the current map at one current.
struct Affine {
    u: f64,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    slope: f64,
    bias: f64,
}

impl NoiseModelParams {
    /// Zero current maps: every λ sits at the floor.
    pub fn zeros(n_cols: usize, hidden: usize) -> Self {
        Self {
            column_embedding: vec![0.0; n_cols],
            in_weight: vec![0.0; hidden],
            in_bias: vec![0.0; hidden],
            out_weight: [vec![0.0; hidden], vec![0.0; hidden]],
            out_bias: [0.0; 2],
            current_scale: 1.0,
            flux_scale: 1.0,
            sigma_e2_raw: inverse_softplus(0.0),
            lambda_min: LAMBDA_MIN,
            frozen: FrozenFlags::default(),
        }
    }

    /// Constant `λ` for every column and current. The embedding is flat and
    /// only the output bias carries the value.
    pub fn constant(n_cols: usize, hidden: usize, lambda: f64, sigma_e2: f64) -> Self {
        let mut p = Self::zeros(n_cols, hidden);
        p.column_embedding.fill(1.0);
        p.out_bias = [0.0, lambda];
        p.set_sigma_e2(sigma_e2);
        p
    }

    /// Fixed `(slope, bias)` regardless of current.
    pub fn with_forced_affine(mut self, slope: f64, bias: f64) -> Self {
        self.in_weight.fill(0.0);
        self.in_bias.fill(0.0);
        self.out_weight[0].fill(0.0);
        self.out_weight[1].fill(0.0);
        self.out_bias = [slope, bias];
        self
    }

    /// Initialise from flux samples `(mA, per-column flux)`: the embedding
    /// is the column mean of the profiles over the mean normalised current
    /// (in units of the mean flux `F`), and the current map starts as
    /// `slope = mA / scale`, `bias = 0`. The remaining hidden units get small
    /// random input weights.
    pub fn init_from_samples(samples: &[(f64, Vec<f64>)], hidden: usize, sigma_e2: f64, seed: u64) -> Result<Self> {
        check_samples(samples)?;
        if hidden < 1 {
            return Err(validation("current map needs at least one hidden unit"));
        }
        let n_cols = samples[0].1.len();
        let scale = samples.iter().map(|s| s.0).fold(0.0, f64::max);
        let mean_u = samples.iter().map(|s| s.0 / scale).sum::<f64>() / samples.len() as f64;
        let flux_scale = samples.iter().flat_map(|s| s.1.iter()).sum::<f64>() / (samples.len() * n_cols) as f64;
        let mut p = Self::zeros(n_cols, hidden);
        p.current_scale = scale;
        p.flux_scale = flux_scale;
        for (i, e) in p.column_embedding.iter_mut().enumerate() {
            *e = samples.iter().map(|s| s.1[i]).sum::<f64>() / samples.len() as f64 / mean_u / flux_scale;
        }
        let mut r = rng::stream(rng::derive(seed, "noise-model-init"), 0);
        p.in_weight[0] = 1.0;
        for w in p.in_weight.iter_mut().skip(1) {
            *w = r.random_range(-0.5..0.5);
        }
        p.out_weight[0][0] = 1.0;
        p.set_sigma_e2(sigma_e2);
        Ok(p)
    }

    pub fn n_cols(&self) -> usize {
        self.column_embedding.len()
    }

    pub fn hidden(&self) -> usize {
        self.in_weight.len()
    }

    pub fn sigma_e2(&self) -> f64 {
        softplus(self.sigma_e2_raw)
    }

    pub fn set_sigma_e2(&mut self, v: f64) {
        self.sigma_e2_raw = inverse_softplus(v.max(0.0));
    }

    fn affine(&self, ma: f64) -> Affine {
        let u = ma / self.current_scale;
        let pre: Vec<f64> = self.in_weight.iter().zip(&self.in_bias).map(|(w, b)| w * u + b).collect();
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let dot = |w: &[f64]| w.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
        Affine {
            u,
            slope: dot(&self.out_weight[0]) + self.out_bias[0],
            bias: dot(&self.out_weight[1]) + self.out_bias[1],
            pre,
            hidden,
        }
    }

    /// `(slope, bias)` at one current.
    pub fn slope_bias(&self, ma: f64) -> (f64, f64) {
        let a = self.affine(ma);
        (a.slope, a.bias)
    }

    fn check_current(ma: f64) -> Result<()> {
        if !(ma > 0.0 && ma.is_finite()) {
            return Err(domain(format!("tube current must be positive, got {ma}")));
        }
        Ok(())
    }

    pub fn lambda_of(&self, column: usize, ma: f64) -> Result<f64> {
        Self::check_current(ma)?;
        let Some(&e) = self.column_embedding.get(column) else {
            return Err(domain(format!("column {column} outside 0..{}", self.n_cols())));
        };
        let (s, b) = self.slope_bias(ma);
        Ok((self.flux_scale * (s * e + b)).max(self.lambda_min))
    }

    pub fn predict_flux_profile(&self, ma: f64) -> Result<Vec<f64>> {
        Self::check_current(ma)?;
        let (s, b) = self.slope_bias(ma);
        let f = self.flux_scale;
        Ok(self.column_embedding.iter().map(|e| (f * (s * e + b)).max(self.lambda_min)).collect())
    }

    pub fn sigma_n2(&self, mu_x: f64, column: usize, ma: f64) -> Result<f64> {
        if !(mu_x >= 0.0) {
            return Err(domain(format!("mean transmission must be nonnegative, got {mu_x}")));
        }
        let l = self.lambda_of(column, ma)?;
        Ok(mu_x / l + self.sigma_e2() / (l * l))
    }

    /// Accumulate gradients for `dL/dλ` given per column at one current.
    /// Columns clamped at `λ_min` receive no gradient.
    pub fn backward_lambda(&self, ma: f64, dlambda: &[f64], grads: &mut NoiseGrads) {
        let a = self.affine(ma);
        let f = self.flux_scale;
        let (mut ds, mut db) = (0.0, 0.0);
        for (i, (&g, &e)) in dlambda.iter().zip(&self.column_embedding).enumerate() {
            if g == 0.0 || f * (a.slope * e + a.bias) < self.lambda_min {
                continue;
            }
            ds += f * g * e;
            db += f * g;
            grads.column_embedding[i] += f * g * a.slope;
        }
        self.backward_affine(&a, ds, db, grads);
    }

    fn backward_affine(&self, a: &Affine, ds: f64, db: f64, grads: &mut NoiseGrads) {
        grads.out_bias[0] += ds;
        grads.out_bias[1] += db;
        for j in 0..self.hidden() {
            grads.out_weight[0][j] += ds * a.hidden[j];
            grads.out_weight[1][j] += db * a.hidden[j];
            if a.pre[j] > 0.0 {
                let dz = ds * self.out_weight[0][j] + db * self.out_weight[1][j];
                grads.in_weight[j] += dz * a.u;
                grads.in_bias[j] += dz;
            }
        }
    }

    /// Chain `dL/dσe²` through the positivity transform.
    pub fn backward_sigma_e2(&self, d_sigma_e2: f64, grads: &mut NoiseGrads) {
        grads.sigma_e2_raw += d_sigma_e2 * sigmoid(self.sigma_e2_raw);
    }

    fn segments(&self) -> [(Segment, usize); 7] {
        let h = self.hidden();
        [
            (Segment::Embedding, self.n_cols()),
            (Segment::Map, h),
            (Segment::Map, h),
            (Segment::Map, h),
            (Segment::Map, h),
            (Segment::Map, 2),
            (Segment::SigmaE2, 1),
        ]
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.column_embedding.clone();
        v.extend(&self.in_weight);
        v.extend(&self.in_bias);
        v.extend(&self.out_weight[0]);
        v.extend(&self.out_weight[1]);
        v.extend(self.out_bias);
        v.push(self.sigma_e2_raw);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let (n, h) = (self.n_cols(), self.hidden());
        let mut it = v.iter().copied();
        let mut take = |k: usize| it.by_ref().take(k).collect::<Vec<_>>();
        self.column_embedding = take(n);
        self.in_weight = take(h);
        self.in_bias = take(h);
        self.out_weight = [take(h), take(h)];
        let ob = take(2);
        self.out_bias = [ob[0], ob[1]];
        self.sigma_e2_raw = take(1)[0];
    }

    /// Round every parameter to `f32`, the checkpoint precision.
    pub fn quantized(&self) -> Self {
        let mut q = self.clone();
        q.set_flat(&self.flat().iter().map(|&v| v as f32 as f64).collect::<Vec<_>>());
        q.current_scale = self.current_scale as f32 as f64;
        q.flux_scale = self.flux_scale as f32 as f64;
        q
    }

    /// Save as a named-parameter checkpoint (values stored as `f32`).
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let mut s = ParamStore::new();
        let n = self.n_cols();
        let h = self.hidden();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        s.add("embedding", Tensor::from_vec([1, 1, 1, n], f(&self.column_embedding)));
        s.add("current_in.weight", Tensor::from_vec([h, 1, 1, 1], f(&self.in_weight)));
        s.add("current_in.bias", Tensor::from_vec([1, 1, 1, h], f(&self.in_bias)));
        s.add("current_out.weight", Tensor::from_vec([2, h, 1, 1], f(&self.out_weight.concat())));
        s.add("current_out.bias", Tensor::from_vec([1, 1, 1, 2], f(&self.out_bias)));
        s.add("sigma_e2.raw", Tensor::from_vec([1, 1, 1, 1], f(&[self.sigma_e2_raw])));
        let meta = serde_json::json!({
            "architecture": "adaptable_noise_model",
            "n_cols": n,
            "hidden": h,
            "lambda_min": self.lambda_min,
            "current_scale": self.current_scale as f32 as f64,
            "flux_scale": self.flux_scale as f32 as f64,
            "frozen_flags": self.frozen,
            "extra": extra,
        });
        s.save(dir, meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (s, meta) = ParamStore::load(dir)?;
        if meta["architecture"] != "adaptable_noise_model" {
            return Err(validation(format!("{} is not a noise-model checkpoint", dir.display())));
        }
        let get = |name: &str| -> Result<Vec<f64>> {
            let id = s
                .find(name)
                .ok_or_else(|| validation(format!("noise-model checkpoint lacks {name}")))?;
            Ok(s.get(id).data().iter().map(|&v| v as f64).collect())
        };
        let n = meta["n_cols"].as_u64().unwrap_or(0) as usize;
        let h = meta["hidden"].as_u64().unwrap_or(0) as usize;
        let mut p = Self::zeros(n, h);
        let ow = get("current_out.weight")?;
        let ob = get("current_out.bias")?;
        let parts = [
            get("embedding")?,
            get("current_in.weight")?,
            get("current_in.bias")?,
            ow,
            ob,
            get("sigma_e2.raw")?,
        ];
        let flat = parts.concat();
        if flat.len() != n + 4 * h + 3 {
            return Err(validation("noise-model checkpoint shapes do not match its manifest"));
        }
        p.set_flat(&flat);
        p.lambda_min = meta["lambda_min"].as_f64().unwrap_or(LAMBDA_MIN);
        p.current_scale = meta["current_scale"].as_f64().unwrap_or(1.0);
        p.flux_scale = meta["flux_scale"].as_f64().unwrap_or(1.0);
        p.frozen = serde_json::from_value(meta["frozen_flags"].clone()).unwrap_or_default();
        Ok((p, meta["extra"].clone()))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Segment {
    Embedding,
    Map,
    SigmaE2,
}

/// Gradient buffers shaped like [`NoiseModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrads {
    pub column_embedding: Vec<f64>,
    pub in_weight: Vec<f64>,
    pub in_bias: Vec<f64>,
    pub out_weight: [Vec<f64>; 2],
    pub out_bias: [f64; 2],
    pub sigma_e2_raw: f64,
}

impl NoiseGrads {
    pub fn zeros_like(p: &NoiseModelParams) -> Self {
        let h = p.hidden();
        Self {
            column_embedding: vec![0.0; p.n_cols()],
            in_weight: vec![0.0; h],
            in_bias: vec![0.0; h],
            out_weight: [vec![0.0; h], vec![0.0; h]],
            out_bias: [0.0; 2],
            sigma_e2_raw: 0.0,
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.column_embedding.clone();
        v.extend(&self.in_weight);
        v.extend(&self.in_bias);
        v.extend(&self.out_weight[0]);
        v.extend(&self.out_weight[1]);
        v.extend(self.out_bias);
        v.push(self.sigma_e2_raw);
        v
    }
}

/// Adam over the noise-model parameters. Frozen groups are skipped, and so
/// is `σe²` when `train_sigma_e2` is false.
#[derive(Clone, Debug)]
pub struct NoiseAdam {
    pub lr: f64,
    pub train_sigma_e2: bool,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl NoiseAdam {
    pub fn new(p: &NoiseModelParams, lr: f64, train_sigma_e2: bool) -> Self {
        let n = p.flat().len();
        Self {
            lr,
            train_sigma_e2,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, p: &mut NoiseModelParams, g: &NoiseGrads) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.step += 1;
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let mut theta = p.flat();
        let grad = g.flat();
        let mut k = 0;
        for (seg, len) in p.segments() {
            let trainable = match seg {
                Segment::Embedding => !p.frozen.embedding,
                Segment::Map => !p.frozen.current_maps,
                Segment::SigmaE2 => self.train_sigma_e2,
            };
            for i in k..k + len {
                if trainable {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
                    theta[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
                }
            }
            k += len;
        }
        p.set_flat(&theta);
    }
}

/// Root mean square relative error in percent.
pub fn rmsre(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(validation(format!(
            "rmsre needs equal nonempty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(i) = truth.iter().position(|&t| !(t > 0.0)) {
        return Err(domain(format!("truth[{i}] is not positive")));
    }
    let ms = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ((p - t) / t).powi(2))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(100.0 * ms.sqrt())
}

fn check_samples(samples: &[(f64, Vec<f64>)]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(validation("no flux samples"));
    };
    let n = first.1.len();
    if n == 0 {
        return Err(validation("flux profiles are empty"));
    }
    for (k, (ma, flux)) in samples.iter().enumerate() {
        if !(*ma > 0.0) {
            return Err(domain(format!("sample {k}: tube current must be positive")));
        }
        if flux.len() != n {
            return Err(validation(format!("sample {k}: {} columns, expected {n}", flux.len())));
        }
        if flux.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(domain(format!("sample {k}: flux must be positive and finite")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Freeze embedding and current maps after the fit.
    pub freeze: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 1e-2,
            freeze: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: usize,
    pub final_loss: f64,
    /// Pooled over all training samples and columns.
    pub train_rmsre: f64,
    /// Pooled over all held-out samples and columns.
    pub heldout_rmsre: Option<f64>,
    /// Per held-out sample, in input order.
    pub heldout_rmsre_per_sample: Vec<f64>,
    pub warnings: Vec<String>,
}

fn pooled_rmsre(p: &NoiseModelParams, samples: &[(f64, Vec<f64>)]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (ma, flux) in samples {
        pred.extend(p.predict_flux_profile(*ma)?);
        truth.extend(flux);
    }
    rmsre(&pred, &truth)
}

/// Full-batch Adam fit of `λ` to known flux profiles. The squared error is
/// divided by the squared mean flux so the loss is dimensionless.
pub fn pretrain(
    mut params: NoiseModelParams,
    train: &[(f64, Vec<f64>)],
    heldout: &[(f64, Vec<f64>)],
    opts: &PretrainOptions,
) -> Result<(NoiseModelParams, FitReport)> {
    check_samples(train)?;
    if train[0].1.len() != params.n_cols() {
        return Err(validation(format!(
            "flux profiles have {} columns, model has {}",
            train[0].1.len(),
            params.n_cols()
        )));
    }
    if !heldout.is_empty() {
        check_samples(heldout)?;
        if heldout[0].1.len() != params.n_cols() {
            return Err(validation("held-out profiles do not match the column count"));
        }
    }
    let mut warnings = Vec::new();
    let mut currents: Vec<f64> = train.iter().map(|s| s.0).collect();
    currents.sort_by(f64::total_cmp);
    currents.dedup();
    if currents.len() < 2 {
        let w = "training data has a single tube current; slope and bias are not identifiable";
        log::warn!("{w}");
        warnings.push(w.to_string());
    }
    params.frozen = FrozenFlags::default();
    let n_values = (train.len() * params.n_cols()) as f64;
    let scale = train.iter().flat_map(|s| s.1.iter()).sum::<f64>() / n_values;
    let mut adam = NoiseAdam::new(&params, opts.learning_rate, false);
    let loss_and_grads = |p: &NoiseModelParams| {
        let mut g = NoiseGrads::zeros_like(p);
        let mut loss = 0.0;
        for (ma, flux) in train {
            let pred = p.predict_flux_profile(*ma).expect("validated currents");
            let d: Vec<f64> = pred
                .iter()
                .zip(flux)
                .map(|(l, t)| {
                    let r = (l - t) / scale;
                    loss += r * r;
                    2.0 * r / scale / n_values
                })
                .collect();
            p.backward_lambda(*ma, &d, &mut g);
        }
        (loss / n_values, g)
    };
    let mut final_loss = loss_and_grads(&params).0;
    for _ in 0..opts.epochs {
        let (loss, g) = loss_and_grads(&params);
        if !loss.is_finite() {
            return Err(Error::NonFinite("noise-model pretraining diverged".into()));
        }
        adam.step(&mut params, &g);
        final_loss = loss;
    }
    if opts.epochs > 0 {
        final_loss = loss_and_grads(&params).0;
    }
    if opts.freeze {
        params.frozen = FrozenFlags {
            embedding: true,
            current_maps: true,
        };
    }
    let heldout_rmsre_per_sample = heldout
        .iter()
        .map(|(ma, flux)| rmsre(&params.predict_flux_profile(*ma)?, flux))
        .collect::<Result<Vec<_>>>()?;
    let report = FitReport {
        epochs: opts.epochs,
        final_loss,
        train_rmsre: pooled_rmsre(&params, train)?,
        heldout_rmsre: if heldout.is_empty() {
            None
        } else {
            Some(pooled_rmsre(&params, heldout)?)
        },
        heldout_rmsre_per_sample,
        warnings,
    };
    Ok((params, report))
}
