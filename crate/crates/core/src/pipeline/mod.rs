//! The commands behind the CLI. Every command reads and writes a run
//! directory:
//!
//! ```text
//! data/{train,test}/{clean,full,low_a<α>}/   containers
//! noise_model/                               fitted noise model + report.json
//! models/<regime>_a<α>/                      network checkpoints
//! denoised/<regime>_a<α>/test_a<α>/          denoised projections
//! recon/<name>/                              FBP image volumes
//! report/                                    evaluation tables and panels
//! cross_test/                                cross-dose quartiles and box plots
//! ```

pub mod config;
pub mod container;
pub mod plots;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use serde::Serialize;

use crate::bench::simulate_set;
use crate::ct_physics::{transmission_to_projection, ProjectionStack, TransmissionStack};
use crate::error::{validation, Error, Result};
use crate::inference::{denoise_stack, DenoiseMode, DenoiseOptions};
use crate::metrics::{evaluate_pair, quantile, report_rows, rows_to_csv, Domain, MetricSummary, ReportRow};
use crate::networks::Network;
use crate::noise_model::{pretrain, FitReport, NoiseModelParams, PretrainOptions};
use crate::rng;
use crate::tomo_sim::fbp_reconstruct_slices;
use crate::training::{regime_noise_model, train, EpochRecord, Regime, TrainData};

pub use config::{alpha_tag, ExperimentConfig};
pub use container::{Container, DomainTag, Provenance};

use config::require;

pub const SPLITS: [&str; 2] = ["train", "test"];

/// A configured run: where it lives and how its artifacts are stamped.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            out: out.unwrap_or_else(|| cfg.out_dir.clone()),
            seed: seed.unwrap_or(cfg.seed),
            cfg,
        })
    }

    /// SHA-256 over the command name, the serialised configuration and the
    /// seed.
    pub fn command_hash(&self, command: &str) -> String {
        let cfg = toml::to_string(&self.cfg).expect("config serialises");
        container::sha256_hex(format!("{command}\n{cfg}\n{}", self.seed).as_bytes())
    }

    fn provenance(&self, command: &str, parents: &[&Path], note: impl Into<String>) -> Provenance {
        Provenance {
            command: command.into(),
            command_hash: self.command_hash(command),
            parents: parents.iter().map(|p| self.rel(p)).collect(),
            note: note.into(),
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    pub fn data_dir(&self, split: &str, name: &str) -> PathBuf {
        self.out.join("data").join(split).join(name)
    }

    pub fn low_dir(&self, split: &str, alpha: f64) -> PathBuf {
        self.data_dir(split, &format!("low_{}", alpha_tag(alpha)))
    }

    pub fn noise_dir(&self) -> PathBuf {
        self.out.join("noise_model")
    }

    pub fn model_dir(&self, regime: Regime, alpha: f64) -> PathBuf {
        self.out.join("models").join(model_name(regime, alpha))
    }

    pub fn denoised_dir(&self, regime: Regime, train_alpha: f64, test_alpha: f64) -> PathBuf {
        self.out
            .join("denoised")
            .join(model_name(regime, train_alpha))
            .join(format!("test_{}", alpha_tag(test_alpha)))
    }

    pub fn recon_dir(&self, name: &str) -> PathBuf {
        self.out.join("recon").join(name)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }

    pub fn cross_dir(&self) -> PathBuf {
        self.out.join("cross_test")
    }

    /// Every (regime, training dose) the configuration asks for: the
    /// evaluated regimes at `train_alphas` plus the cross-test grid.
    pub fn model_grid(&self) -> Vec<(Regime, f64)> {
        let c = &self.cfg;
        let mut grid: Vec<(Regime, f64)> = Vec::new();
        let first = c.regimes.iter().flat_map(|&r| c.train_alphas.iter().map(move |&a| (r, a)));
        let cross = c
            .cross_test
            .regimes
            .iter()
            .flat_map(|&r| c.cross_test.train_alphas.iter().map(move |&a| (r, a)));
        for (r, a) in first.chain(cross) {
            if !grid.iter().any(|&(r2, a2)| r2 == r && same(a, a2)) {
                grid.push((r, a));
            }
        }
        grid
    }

    /// Test doses each model is applied to by `denoise`.
    pub fn test_doses(&self, regime: Regime, train_alpha: f64) -> Vec<f64> {
        let c = &self.cfg;
        let mut v = Vec::new();
        if c.regimes.contains(&regime) && c.train_alphas.iter().any(|&a| same(a, train_alpha)) {
            v.push(train_alpha);
        }
        if c.cross_test.regimes.contains(&regime) && c.cross_test.train_alphas.iter().any(|&a| same(a, train_alpha)) {
            v.extend(c.cross_test.test_alphas.iter().copied());
        }
        let mut out: Vec<f64> = Vec::new();
        for a in v {
            if !out.iter().any(|&b| same(a, b)) {
                out.push(a);
            }
        }
        out
    }
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

pub fn model_name(regime: Regime, alpha: f64) -> String {
    format!("{}_{}", regime.name(), alpha_tag(alpha))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_transmission(dir: &Path, what: &str) -> Result<TransmissionStack> {
    require(dir, what)?;
    Container::read(dir)?.to_transmission()
}

fn read_projection(dir: &Path, what: &str) -> Result<ProjectionStack> {
    require(dir, what)?;
    Container::read(dir)?.to_projection()
}

fn load_noise_model(run: &Run) -> Result<Option<NoiseModelParams>> {
    let dir = run.noise_dir();
    if !dir.join("manifest.json").exists() {
        return Ok(None);
    }
    Ok(Some(NoiseModelParams::load(&dir)?.0))
}

// ---------------------------------------------------------------- simulate

/// Simulate the train and test phantoms: clean projections, a full-dose
/// measurement and one low-dose stack per configured dose fraction.
pub fn simulate(run: &Run) -> Result<Vec<PathBuf>> {
    let c = &run.cfg;
    let mut written = Vec::new();
    for (split, variant) in SPLITS.into_iter().zip([c.train_variant, c.test_variant]) {
        let set = simulate_set(&c.bench, variant, &c.alphas, rng::derive(run.seed, split))?;
        let clean_dir = run.data_dir(split, "clean");
        Container::from_projection(&set.clean, run.seed, run.provenance("simulate", &[], format!("phantom variant {variant}")))
            .write(&clean_dir)?;
        let full_dir = run.data_dir(split, "full");
        Container::from_transmission(&set.full, run.seed, run.provenance("simulate", &[&clean_dir], "full dose"))
            .write(&full_dir)?;
        written.extend([clean_dir, full_dir.clone()]);
        for (alpha, t) in &set.low {
            let dir = run.low_dir(split, *alpha);
            Container::from_transmission(t, run.seed, run.provenance("simulate", &[&full_dir], format!("dose {alpha}")))
                .write(&dir)?;
            written.push(dir);
        }
        log::info!("simulated {split} split ({} frames)", set.clean.frames());
    }
    Ok(written)
}

// ---------------------------------------------------------- pretrain-noise

#[derive(Clone, Debug, Serialize)]
pub struct NoiseReport {
    pub train_currents: Vec<f64>,
    pub heldout_currents: Vec<f64>,
    pub fit: FitReport,
    pub rmsre_gate: f64,
    pub passed: bool,
}

/// Distinct values, sorted ascending.
fn distinct_sorted(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1.0));
    v
}

/// Split distinct currents into (train, held-out): at most `max` of them,
/// evenly spaced, with every `every`-th one held out.
pub fn split_currents(currents: &[f64], max: usize, every: usize) -> (Vec<f64>, Vec<f64>) {
    let n = currents.len();
    let picked: Vec<f64> = if max == 0 || n <= max {
        currents.to_vec()
    } else if max == 1 {
        vec![currents[n / 2]]
    } else {
        (0..max).map(|i| currents[(i * (n - 1) + (max - 1) / 2) / (max - 1)]).collect()
    };
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, c) in picked.into_iter().enumerate() {
        if every > 1 && i % every == every - 1 {
            held.push(c);
        } else {
            train.push(c);
        }
    }
    (train, held)
}

/// Fit the noise model to the recorded flux of the training split. Exits
/// with a gate failure when the held-out RMSRE exceeds the configured limit;
/// the checkpoint and report are written either way.
pub fn pretrain_noise(run: &Run) -> Result<NoiseReport> {
    let c = &run.cfg;
    let mut stacks = vec![run.data_dir("train", "full")];
    stacks.extend(c.alphas.iter().map(|&a| run.low_dir("train", a)));
    let mut metas = Vec::new();
    for dir in &stacks {
        metas.push(read_transmission(dir, "training measurement (run simulate first)")?.meta);
    }
    let flux = metas[0]
        .flux_per_ma
        .clone()
        .ok_or_else(|| validation("training data records no flux profile"))?;
    let currents = distinct_sorted(metas.iter().flat_map(|m| m.tube_current.iter().copied()));
    let (train_c, held_c) = split_currents(&currents, c.noise.max_currents, c.noise.heldout_every);
    let sample = |ma: f64| (ma, flux.iter().map(|f| f * ma).collect::<Vec<_>>());
    let train_s: Vec<_> = train_c.iter().map(|&m| sample(m)).collect();
    let held_s: Vec<_> = held_c.iter().map(|&m| sample(m)).collect();
    let init = NoiseModelParams::init_from_samples(
        &train_s,
        c.noise.hidden,
        metas[0].electronic_variance,
        rng::derive(run.seed, "noise_model"),
    )?;
    let (model, fit) = pretrain(
        init,
        &train_s,
        &held_s,
        &PretrainOptions {
            epochs: c.noise.epochs,
            learning_rate: c.noise.learning_rate,
            freeze: true,
        },
    )?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    let passed = fit.heldout_rmsre.is_none_or(|r| r <= c.noise.rmsre_gate);
    let report = NoiseReport {
        train_currents: train_c,
        heldout_currents: held_c,
        fit,
        rmsre_gate: c.noise.rmsre_gate,
        passed,
    };
    let parents: Vec<String> = stacks.iter().map(|p| run.rel(p)).collect();
    model.save(
        &run.noise_dir(),
        serde_json::json!({
            "command_hash": run.command_hash("pretrain-noise"),
            "parents": parents,
            "heldout_rmsre": report.fit.heldout_rmsre,
            "train_rmsre": report.fit.train_rmsre,
        }),
    )?;
    write_json(&run.noise_dir().join("report.json"), &report)?;
    log::info!(
        "noise model: train RMSRE {:.4}%, held-out {:?}",
        report.fit.train_rmsre,
        report.fit.heldout_rmsre
    );
    if !passed {
        return Err(Error::Gate(format!(
            "held-out RMSRE {:.3}% exceeds {:.3}%",
            report.fit.heldout_rmsre.unwrap_or(f64::NAN),
            c.noise.rmsre_gate
        )));
    }
    Ok(report)
}

// ------------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub regime: Regime,
    pub train_alpha: f64,
    pub epochs: usize,
    pub stopped_on_plateau: bool,
    pub final_val_loss: f64,
}

/// Train one network per (regime, dose) in `grid`.
pub fn train_models(run: &Run, grid: &[(Regime, f64)]) -> Result<Vec<TrainSummary>> {
    let c = &run.cfg;
    let fitted = load_noise_model(run)?;
    let mut out = Vec::new();
    for &(regime, alpha) in grid {
        let noisy_dir = run.low_dir("train", alpha);
        let noisy = read_transmission(&noisy_dir, "training data (run simulate first)")?;
        let clean_dir = run.data_dir("train", "clean");
        let clean = if regime.supervised() {
            Some(read_projection(&clean_dir, "clean training projections")?)
        } else {
            None
        };
        if regime.uses_nll() && fitted.is_none() && regime != Regime::N2ntdLambdaConst {
            return Err(validation(format!("{regime} needs a noise model: run pretrain-noise first")));
        }
        let noise = regime_noise_model(regime, fitted.as_ref(), &noisy, c.train.freeze_noise_layers)?;
        let seed = rng::derive(run.seed, &model_name(regime, alpha));
        let net = Network::new(regime.architecture(), &c.network, regime.mean_activation(), seed)?;
        let dir = run.model_dir(regime, alpha);
        fs::create_dir_all(&dir)?;
        log::info!("training {}", model_name(regime, alpha));
        let outcome = train(
            net,
            noise,
            TrainData {
                noisy: &noisy,
                clean: clean.as_ref(),
            },
            &c.train_for(regime, seed),
            Some(&dir),
        )?;
        let mut parents = vec![run.rel(&noisy_dir)];
        if clean.is_some() {
            parents.push(run.rel(&clean_dir));
        }
        let frozen = outcome.noise_model.as_ref().map(|m| m.frozen);
        outcome.network.save(
            &dir,
            seed,
            serde_json::json!({
                "regime": regime,
                "train_alpha": alpha,
                "command_hash": run.command_hash("train"),
                "parents": parents,
                "noise_model": outcome.noise_model.as_ref().map(|m| serde_json::json!({
                    "frozen": frozen,
                    "sigma_e2": m.sigma_e2(),
                })),
                "epochs": outcome.log.len(),
                "stopped_on_plateau": outcome.stopped_on_plateau,
            }),
        )?;
        if let Some(m) = &outcome.noise_model {
            m.save(&dir.join("noise_model"), serde_json::json!({ "regime": regime }))?;
        }
        write_log(&dir.join("train_log.jsonl"), &outcome.log)?;
        out.push(TrainSummary {
            regime,
            train_alpha: alpha,
            epochs: outcome.log.len(),
            stopped_on_plateau: outcome.stopped_on_plateau,
            final_val_loss: outcome.log.last().map_or(f64::NAN, |r| r.val_loss),
        });
    }
    Ok(out)
}

fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// A trained network with the noise model it should be combined with.
pub fn load_model(run: &Run, regime: Regime, alpha: f64) -> Result<(Network, Option<NoiseModelParams>)> {
    let dir = run.model_dir(regime, alpha);
    require(&dir.join("manifest.json"), &format!("model {}", model_name(regime, alpha)))?;
    let (net, _) = Network::load(&dir)?;
    let noise = if dir.join("noise_model").exists() {
        Some(NoiseModelParams::load(&dir.join("noise_model"))?.0)
    } else {
        load_noise_model(run)?
    };
    Ok((net, noise))
}

// ----------------------------------------------------------------- denoise

/// Denoise one test stack with one model and store the container.
pub fn denoise_one(run: &Run, regime: Regime, train_alpha: f64, test_alpha: f64) -> Result<PathBuf> {
    let (net, noise) = load_model(run, regime, train_alpha)?;
    let src = run.low_dir("test", test_alpha);
    let noisy = read_transmission(&src, "test data (run simulate first)")?;
    let den = denoise_stack(
        &net,
        noise.as_ref(),
        &noisy,
        DenoiseOptions {
            mode: DenoiseMode::Model,
            batch_frames: run.cfg.batch_frames,
        },
    )?;
    let dir = run.denoised_dir(regime, train_alpha, test_alpha);
    let model = run.model_dir(regime, train_alpha);
    Container::from_projection(&den, run.seed, run.provenance("denoise", &[&src, &model], model_name(regime, train_alpha)))
        .write(&dir)?;
    Ok(dir)
}

/// Apply every trained model in the grid to the test doses it is evaluated
/// at. Models missing from `models/` are skipped with a warning.
pub fn denoise(run: &Run, grid: &[(Regime, f64)]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for &(regime, a) in grid {
        if !run.model_dir(regime, a).join("manifest.json").exists() {
            log::warn!("model {} not trained; skipped", model_name(regime, a));
            continue;
        }
        for t in run.test_doses(regime, a) {
            log::info!("denoising test {} with {}", alpha_tag(t), model_name(regime, a));
            out.push(denoise_one(run, regime, a, t)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("none of the selected models is trained; run `train` first".into()));
    }
    Ok(out)
}

// ------------------------------------------------------------- reconstruct

fn reconstruct_into(run: &Run, proj: &ProjectionStack, name: &str, parent: &Path) -> Result<PathBuf> {
    let b = &run.cfg.bench;
    let slices = fbp_reconstruct_slices(proj, &b.geometry()?, b.phantom_size)?;
    let n = b.phantom_size;
    let mut vol = Array3::zeros((slices.len(), n, n));
    for (mut dst, s) in vol.axis_iter_mut(Axis(0)).zip(&slices) {
        dst.assign(&s.data);
    }
    let dir = run.recon_dir(name);
    Container::from_images(&vol, b.geometry()?.detector_spacing, run.seed, run.provenance("reconstruct", &[parent], name))
        .write(&dir)?;
    Ok(dir)
}

pub fn recon_name_denoised(regime: Regime, train_alpha: f64, test_alpha: f64) -> String {
    format!("{}_test_{}", model_name(regime, train_alpha), alpha_tag(test_alpha))
}

/// FBP volumes of the clean test projections, the noisy inputs at each
/// evaluated dose and each matched-dose denoised stack.
pub fn reconstruct(run: &Run) -> Result<Vec<PathBuf>> {
    let c = &run.cfg;
    let clean_dir = run.data_dir("test", "clean");
    let clean = read_projection(&clean_dir, "clean test projections (run simulate first)")?;
    let mut out = vec![reconstruct_into(run, &clean, "clean", &clean_dir)?];
    for &a in &c.train_alphas {
        let dir = run.low_dir("test", a);
        let (p, _) = transmission_to_projection(&read_transmission(&dir, "test data")?);
        out.push(reconstruct_into(run, &p, &format!("noisy_{}", alpha_tag(a)), &dir)?);
        for &r in &c.regimes {
            let d = run.denoised_dir(r, a, a);
            if !d.exists() {
                log::warn!("{} not denoised; skipped", recon_name_denoised(r, a, a));
                continue;
            }
            let p = read_projection(&d, "denoised projections")?;
            out.push(reconstruct_into(run, &p, &recon_name_denoised(r, a, a), &d)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, Serialize)]
pub struct EvaluationEntry {
    pub regime: String,
    pub dose: f64,
    pub projection: MetricSummary,
    pub image: Option<MetricSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub command_hash: String,
    pub entries: Vec<EvaluationEntry>,
    pub rows: Vec<ReportRow>,
}

impl Evaluation {
    pub fn entry(&self, regime: &str, dose: f64) -> Option<&EvaluationEntry> {
        self.entries.iter().find(|e| e.regime == regime && same(e.dose, dose))
    }
}

fn max_of(a: &Array3<f64>) -> f64 {
    a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn image_range(a: &Array3<f64>) -> f64 {
    max_of(a) - a.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Matched-dose comparison of the noisy input and each regime against the
/// clean test data, in the projection domain and (when `reconstruct` has
/// run) the image domain.
pub fn evaluate(run: &Run) -> Result<Evaluation> {
    let c = &run.cfg;
    let clean = read_projection(&run.data_dir("test", "clean"), "clean test projections (run simulate first)")?;
    let p_range = max_of(&clean.data);
    let clean_img = match run.recon_dir("clean").exists() {
        true => Some(Container::read(&run.recon_dir("clean"))?.data_f64()),
        false => None,
    };
    let i_range = clean_img.as_ref().map(image_range);
    let image_metrics = |name: &str| -> Result<Option<MetricSummary>> {
        let (Some(ci), Some(r)) = (&clean_img, i_range) else {
            return Ok(None);
        };
        let dir = run.recon_dir(name);
        if !dir.exists() {
            return Ok(None);
        }
        Ok(Some(evaluate_pair(&Container::read(&dir)?.data_f64(), ci, Domain::Image, r)?))
    };
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    let mut panels: Vec<(String, f64, ProjectionStack)> = Vec::new();
    for &a in &c.train_alphas {
        let (noisy, _) = transmission_to_projection(&read_transmission(&run.low_dir("test", a), "test data")?);
        let mut push = |name: &str, p: &ProjectionStack, img: Option<MetricSummary>| -> Result<()> {
            let proj = evaluate_pair(&p.data, &clean.data, Domain::Projection, p_range)?;
            rows.extend(report_rows("test", a, name, &proj));
            if let Some(s) = &img {
                rows.extend(report_rows("test", a, name, s));
            }
            entries.push(EvaluationEntry {
                regime: name.into(),
                dose: a,
                projection: proj,
                image: img,
            });
            Ok(())
        };
        push("noisy", &noisy, image_metrics(&format!("noisy_{}", alpha_tag(a)))?)?;
        panels.push(("noisy".into(), a, noisy));
        for &r in &c.regimes {
            let d = run.denoised_dir(r, a, a);
            if !d.exists() {
                log::warn!("{} not denoised; left out of the report", recon_name_denoised(r, a, a));
                continue;
            }
            let p = read_projection(&d, "denoised projections")?;
            push(r.name(), &p, image_metrics(&recon_name_denoised(r, a, a))?)?;
            panels.push((r.name().into(), a, p));
        }
    }
    let report = Evaluation {
        command_hash: run.command_hash("evaluate"),
        entries,
        rows,
    };
    let dir = run.report_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.csv"), rows_to_csv(&report.rows))?;
    write_json(&dir.join("report.json"), &report)?;
    if c.evaluate.plots {
        write_evaluation_panels(run, &clean, &panels)?;
    }
    if let Some(gain) = c.evaluate.min_psnr_gain_db {
        for &a in &c.train_alphas {
            let base = report.entry("noisy", a).map(|e| e.projection.psnr.mean);
            let ours = report.entry(Regime::N2ntdAnm.name(), a).map(|e| e.projection.psnr.mean);
            match (base, ours) {
                (Some(b), Some(o)) if o - b >= gain => {}
                (Some(b), Some(o)) => {
                    return Err(Error::Gate(format!(
                        "n2ntd_anm gains {:.2} dB over the noisy input at dose {a}, below {gain} dB",
                        o - b
                    )))
                }
                _ => return Err(Error::Gate(format!("no n2ntd_anm result at dose {a} to gate on"))),
            }
        }
    }
    Ok(report)
}

fn write_evaluation_panels(run: &Run, clean: &ProjectionStack, panels: &[(String, f64, ProjectionStack)]) -> Result<()> {
    let dir = run.report_dir().join("plots");
    fs::create_dir_all(&dir)?;
    let hi = max_of(&clean.data);
    for &a in &run.cfg.train_alphas {
        let group: Vec<_> = panels.iter().filter(|p| same(p.1, a)).collect();
        for &f in &run.cfg.evaluate.plot_frames {
            if f >= clean.frames() {
                log::warn!("plot frame {f} is out of range");
                continue;
            }
            let mut views: Vec<_> = group.iter().map(|p| p.2.data.index_axis(Axis(0), f)).collect();
            views.push(clean.data.index_axis(Axis(0), f));
            plots::write_panels(&dir.join(format!("projection_{}_frame{f}.png", alpha_tag(a))), &views, 0.0, hi, 2)?;
        }
        let mut imgs = Vec::new();
        let mut names: Vec<String> = group
            .iter()
            .map(|p| {
                if p.0 == "noisy" {
                    format!("noisy_{}", alpha_tag(a))
                } else {
                    format!("{}_{}_test_{}", p.0, alpha_tag(a), alpha_tag(a))
                }
            })
            .collect();
        names.push("clean".into());
        for n in &names {
            let d = run.recon_dir(n);
            if d.exists() {
                imgs.push(Container::read(&d)?.data_f64());
            }
        }
        if imgs.len() == names.len() {
            let mid = imgs[0].dim().0 / 2;
            let clean_img = imgs.last().expect("non-empty");
            let (lo, hi) = (0.0, max_of(clean_img));
            let views: Vec<_> = imgs.iter().map(|v| v.index_axis(Axis(0), mid)).collect();
            plots::write_panels(&dir.join(format!("image_{}_slice{mid}.png", alpha_tag(a))), &views, lo, hi, 1)?;
        }
    }
    Ok(())
}

// -------------------------------------------------------------- cross-test

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(v: &[f64]) -> Self {
        Self {
            min: quantile(v, 0.0),
            q1: quantile(v, 0.25),
            median: quantile(v, 0.5),
            q3: quantile(v, 0.75),
            max: quantile(v, 1.0),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossCell {
    /// Regime name, or `noisy` for the unprocessed input.
    pub regime: String,
    pub train_alpha: Option<f64>,
    pub test_alpha: f64,
    pub present: bool,
    pub psnr_mean: Option<f64>,
    pub psnr: Option<Quartiles>,
    pub ssim: Option<Quartiles>,
    pub gmsd: Option<Quartiles>,
    #[serde(skip)]
    pub psnr_values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossTest {
    pub command_hash: String,
    pub cells: Vec<CrossCell>,
}

impl CrossTest {
    pub fn cell(&self, regime: &str, train_alpha: Option<f64>, test_alpha: f64) -> Option<&CrossCell> {
        self.cells.iter().find(|c| {
            c.regime == regime
                && same(c.test_alpha, test_alpha)
                && match (c.train_alpha, train_alpha) {
                    (Some(x), Some(y)) => same(x, y),
                    (None, None) => true,
                    _ => false,
                }
        })
    }
}

fn cell_from(regime: &str, train_alpha: Option<f64>, test_alpha: f64, s: Option<&MetricSummary>) -> CrossCell {
    CrossCell {
        regime: regime.into(),
        train_alpha,
        test_alpha,
        present: s.is_some(),
        psnr_mean: s.map(|s| s.psnr.mean),
        psnr: s.map(|s| Quartiles::of(&s.psnr_values())),
        ssim: s.map(|s| Quartiles::of(&s.ssim_values())),
        gmsd: s.map(|s| Quartiles::of(&s.gmsd_values())),
        psnr_values: s.map(|s| s.psnr_values()).unwrap_or_default(),
    }
}

/// Per-frame projection PSNR/SSIM/GMSD quartiles of every model in the
/// cross-test grid on every test dose. Denoised stacks from `denoise` are
/// reused; missing models leave absent cells and a warning.
pub fn cross_test(run: &Run) -> Result<CrossTest> {
    let x = &run.cfg.cross_test;
    let clean = read_projection(&run.data_dir("test", "clean"), "clean test projections (run simulate first)")?;
    let range = max_of(&clean.data);
    let mut cells = Vec::new();
    for &t in &x.test_alphas {
        let (noisy, _) = transmission_to_projection(&read_transmission(&run.low_dir("test", t), "test data")?);
        let s = evaluate_pair(&noisy.data, &clean.data, Domain::Projection, range)?;
        cells.push(cell_from("noisy", None, t, Some(&s)));
        for &r in &x.regimes {
            for &a in &x.train_alphas {
                if !run.model_dir(r, a).join("manifest.json").exists() {
                    log::warn!("cross-test cell {} on {} absent: model not trained", model_name(r, a), alpha_tag(t));
                    cells.push(cell_from(r.name(), Some(a), t, None));
                    continue;
                }
                let dir = run.denoised_dir(r, a, t);
                if !dir.exists() {
                    denoise_one(run, r, a, t)?;
                }
                let p = read_projection(&dir, "denoised projections")?;
                let s = evaluate_pair(&p.data, &clean.data, Domain::Projection, range)?;
                cells.push(cell_from(r.name(), Some(a), t, Some(&s)));
            }
        }
    }
    let result = CrossTest {
        command_hash: run.command_hash("cross-test"),
        cells,
    };
    let dir = run.cross_dir();
    write_json(&dir.join("cross_test.json"), &result)?;
    fs::write(dir.join("cross_test.csv"), cross_csv(&result))?;
    if x.plots {
        let pdir = dir.join("plots");
        fs::create_dir_all(&pdir)?;
        for &t in &x.test_alphas {
            let groups: Vec<(String, Vec<f64>)> = result
                .cells
                .iter()
                .filter(|c| c.present && same(c.test_alpha, t))
                .map(|c| {
                    let label = c.train_alpha.map_or(c.regime.clone(), |a| model_name_str(&c.regime, a));
                    (label, c.psnr_values.clone())
                })
                .collect();
            plots::write_box_plot(&pdir.join(format!("psnr_test_{}.png", alpha_tag(t))), &groups)?;
        }
    }
    Ok(result)
}

fn model_name_str(regime: &str, alpha: f64) -> String {
    format!("{regime}_{}", alpha_tag(alpha))
}

fn cross_csv(r: &CrossTest) -> String {
    let mut s = String::from("regime,train_alpha,test_alpha,metric,min,q1,median,q3,max\n");
    for c in &r.cells {
        let train = c.train_alpha.map_or(String::new(), |a| a.to_string());
        for (m, q) in [("psnr", c.psnr), ("ssim", c.ssim), ("gmsd", c.gmsd)] {
            match q {
                Some(q) => s.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    c.regime, train, c.test_alpha, m, q.min, q.q1, q.median, q.q3, q.max
                )),
                None => s.push_str(&format!("{},{},{},{},,,,,\n", c.regime, train, c.test_alpha, m)),
            }
        }
    }
    s
}
