//! Training data: frame buffers, noise levels, Half2Half pairs and patch
//! sampling.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sinodenoise_nn::Tensor;

use crate::ct_physics::{AcquisitionMeta, TransmissionStack, TRANSMISSION_CLAMP};
use crate::error::{validation, Error, Result};
use crate::noise_model::NoiseModelParams;
use crate::{par, rng};

/// Frames × rows × cols in `f32`, the network input precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameData {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FrameData {
    pub fn from_array(a: &Array3<f64>) -> Self {
        let (frames, rows, cols) = a.dim();
        Self {
            frames,
            rows,
            cols,
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    /// `-ln(max(T, τ))` of a transmission stack.
    pub fn projection_of(t: &Array3<f64>) -> Self {
        let (frames, rows, cols) = t.dim();
        Self {
            frames,
            rows,
            cols,
            data: t.iter().map(|&v| -(v.max(TRANSMISSION_CLAMP).ln()) as f32).collect(),
        }
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let len = self.rows * self.cols;
        &self.data[f * len..(f + 1) * len]
    }

    /// Copy a `p × p` crop of frame `f` at `(row, col)` into `out`.
    pub fn crop_into(&self, f: usize, row: usize, col: usize, p: usize, out: &mut [f32]) {
        let frame = self.frame(f);
        for y in 0..p {
            let src = (row + y) * self.cols + col;
            out[y * p..(y + 1) * p].copy_from_slice(&frame[src..src + p]);
        }
    }
}

/// Per-frame, per-column `λ` and the electronic variance, from a fitted
/// noise model or from known acquisition flux.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseLevels {
    pub lambda: Vec<Vec<f64>>,
    pub sigma_e2: f64,
}

impl NoiseLevels {
    pub fn from_model(model: &NoiseModelParams, meta: &AcquisitionMeta) -> Result<Self> {
        Ok(Self {
            lambda: meta
                .tube_current
                .iter()
                .map(|&ma| model.predict_flux_profile(ma))
                .collect::<Result<_>>()?,
            sigma_e2: model.sigma_e2(),
        })
    }

    /// Exact incident flux and electronic variance of the acquisition.
    pub fn from_meta(meta: &AcquisitionMeta) -> Result<Self> {
        Ok(Self {
            lambda: (0..meta.frames()).map(|f| meta.incident_flux(f)).collect::<Result<_>>()?,
            sigma_e2: meta.electronic_variance,
        })
    }

    /// `σn² = μ/λ + σe²/λ²` with `μ` clipped at zero.
    pub fn sigma_n2(&self, mu: f64, frame: usize, col: usize) -> f64 {
        let l = self.lambda[frame][col];
        mu.max(0.0) / l + self.sigma_e2 / (l * l)
    }

    /// Noise standard deviation of `-ln T` around a noisy transmission `t`,
    /// `σn / max(t, σn)`; at most 1 where the signal drowns in noise.
    pub fn projection_sigma(&self, t: f64, frame: usize, col: usize) -> f64 {
        let s = self.sigma_n2(t, frame, col).sqrt();
        if t <= s {
            1.0
        } else {
            s / t
        }
    }
}

/// Split one noisy transmission stack into two realisations whose average
/// is the input and whose individual noise matches half the dose:
/// `T1 = T + e`, `T2 = T - e` with `Var(e) = T/I0 + 3σe²/I0²`.
pub fn half2half_pair(t: &TransmissionStack, seed: u64) -> Result<(TransmissionStack, TransmissionStack)> {
    let meta = &t.meta;
    let cols = t.cols();
    let se2 = meta.electronic_variance;
    let flux = (0..t.frames()).map(|f| meta.incident_flux(f)).collect::<Result<Vec<_>>>()?;
    let len = t.rows() * cols;
    let src = t.data.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut e = vec![0.0f64; src.len()];
    par::for_each_chunk_mut(&mut e, len, |f, out| {
        let mut r = rng::stream(seed, f as u64);
        for (k, v) in out.iter_mut().enumerate() {
            let i0 = flux[f][k % cols];
            let tv = src[f * len + k].max(0.0);
            let v_full = tv / i0 + se2 / (i0 * i0);
            let v_half = 2.0 * tv / i0 + 4.0 * se2 / (i0 * i0);
            assert!(v_half >= v_full, "half-dose variance below full-dose variance");
            let z: f64 = StandardNormal.sample(&mut r);
            *v = (v_half - v_full).sqrt() * z;
        }
    });
    let shape = t.data.dim();
    let e = Array3::from_shape_vec(shape, e).expect("same shape");
    Ok((
        TransmissionStack {
            data: &t.data + &e,
            meta: meta.clone(),
        },
        TransmissionStack {
            data: &t.data - &e,
            meta: meta.clone(),
        },
    ))
}

/// Location of one training patch: target frame and crop origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchIndex {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// Seeded uniform sampler over target frames and crop origins.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    rng: rng::StreamRng,
    targets: Vec<usize>,
    rows: usize,
    cols: usize,
    patch: usize,
}

impl PatchSampler {
    /// `k` is the window half-width (0 for single-frame regimes); target
    /// frames need `k` neighbours on each side. `keep` filters targets.
    pub fn new(
        frames: usize,
        rows: usize,
        cols: usize,
        patch: usize,
        k: usize,
        keep: impl Fn(usize) -> bool,
        seed: u64,
    ) -> Result<Self> {
        if frames < 2 * k + 1 {
            return Err(Error::Dataset(format!(
                "{frames} frames cannot hold a window of {} consecutive frames",
                2 * k + 1
            )));
        }
        if rows < patch || cols < patch {
            return Err(Error::Dataset(format!("{rows}x{cols} frames are smaller than {patch}x{patch} patches")));
        }
        let targets: Vec<usize> = (k..frames - k).filter(|&f| keep(f)).collect();
        if targets.is_empty() {
            return Err(Error::Dataset("no frames left to sample targets from".into()));
        }
        Ok(Self {
            rng: rng::stream(seed, 0),
            targets,
            rows,
            cols,
            patch,
        })
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn next_index(&mut self) -> PatchIndex {
        PatchIndex {
            frame: self.targets[self.rng.random_range(0..self.targets.len())],
            row: self.rng.random_range(0..=self.rows - self.patch),
            col: self.rng.random_range(0..=self.cols - self.patch),
        }
    }

    pub fn batch(&mut self, n: usize) -> Vec<PatchIndex> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

/// Stack the same crop of frame `frame + offset` for every index into
/// `[B, 1, p, p]`.
pub fn gather(data: &FrameData, idx: &[PatchIndex], offset: isize, p: usize) -> Tensor {
    let mut out = Tensor::zeros([idx.len(), 1, p, p]);
    for (b, ix) in idx.iter().enumerate() {
        let f = ix.frame as isize + offset;
        assert!(f >= 0 && (f as usize) < data.frames, "window leaves the stack");
        data.crop_into(f as usize, ix.row, ix.col, p, &mut out.data_mut()[b * p * p..(b + 1) * p * p]);
    }
    out
}

/// The `2k` neighbour crops of each index: past `i-k .. i-1`, then future
/// `i+k .. i+1`.
pub fn gather_window(data: &FrameData, idx: &[PatchIndex], k: usize, p: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let past = (1..=k).rev().map(|d| gather(data, idx, -(d as isize), p)).collect();
    let future = (1..=k).rev().map(|d| gather(data, idx, d as isize, p)).collect();
    (past, future)
}

/// Per-pixel `λ` for a batch of crops, `[B · p · p]`.
pub fn lambda_patches(levels: &NoiseLevels, idx: &[PatchIndex], p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * p * p);
    for ix in idx {
        let row = &levels.lambda[ix.frame][ix.col..ix.col + p];
        for _ in 0..p {
            out.extend_from_slice(row);
        }
    }
    out
}

pub(crate) fn check_frames_match(a: &FrameData, b: &FrameData) -> Result<()> {
    if (a.frames, a.rows, a.cols) != (b.frames, b.rows, b.cols) {
        return Err(validation(format!(
            "stacks differ in shape: {}x{}x{} vs {}x{}x{}",
            a.frames, a.rows, a.cols, b.frames, b.rows, b.cols
        )));
    }
    Ok(())
}
