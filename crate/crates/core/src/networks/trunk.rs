use sinodenoise_nn::{Binder, Padding, ParamId, ParamStore, Var};

use super::{check_frames, Builder, NetConfig, KERNEL};
use crate::error::{validation, Result};

/// DnCNN-style stack: `depth` bias-free 3×3 convolutions with ReLU between
/// them and none after the last.
#[derive(Clone, Debug)]
pub struct Trunk {
    layers: Vec<ParamId>,
}

impl Trunk {
    pub(crate) fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, cfg: &NetConfig) -> Self {
        let d = cfg.depth.max(1);
        let layers = (0..d)
            .map(|i| {
                let ci = if i == 0 { cin } else { cfg.channels };
                let co = if i + 1 == d { cout } else { cfg.channels };
                b.conv(&format!("{name}.{i}"), [co, ci, KERNEL, KERNEL], if i + 1 == d { 0.1 } else { 1.0 })
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'g>(&self, b: &Binder<'g>, x: Var<'g>) -> Var<'g> {
        let mut y = x;
        for (i, &w) in self.layers.iter().enumerate() {
            y = y.conv2d(b.param(w), Padding::same(KERNEL));
            if i + 1 < self.layers.len() {
                y = y.relu();
            }
        }
        y
    }
}

/// Supervised residual denoiser in the projection domain. Input channels:
/// the target frame, its `2k` neighbours, and a noise-level map.
#[derive(Clone, Debug)]
pub struct Noise2CleanNet {
    pub cfg: NetConfig,
    pub params: ParamStore,
    trunk: Trunk,
}

impl Noise2CleanNet {
    pub fn new(cfg: &NetConfig, seed: u64) -> Self {
        let mut b = Builder::new(seed);
        let trunk = Trunk::new(&mut b, "trunk", 2 * cfg.k + 2, 1, cfg);
        Self {
            cfg: cfg.clone(),
            params: b.store,
            trunk,
        }
    }

    /// Returns `center - residual`.
    pub fn forward<'g>(
        &self,
        b: &Binder<'g>,
        center: Var<'g>,
        neighbours: &[Var<'g>],
        noise_map: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let Some(noise_map) = noise_map else {
            return Err(validation("noise2clean needs a noise-level map"));
        };
        if neighbours.len() != 2 * self.cfg.k {
            return Err(validation(format!(
                "noise2clean needs {} neighbours, got {}",
                2 * self.cfg.k,
                neighbours.len()
            )));
        }
        let mut inputs = vec![center];
        inputs.extend_from_slice(neighbours);
        inputs.push(noise_map);
        check_frames(&inputs, "noise2clean input")?;
        let residual = self.trunk.forward(b, Var::cat_channels(&inputs));
        Ok(center.sub(residual))
    }
}

/// Direct single-frame denoiser in the transmission domain.
#[derive(Clone, Debug)]
pub struct Half2HalfNet {
    pub cfg: NetConfig,
    pub params: ParamStore,
    trunk: Trunk,
}

impl Half2HalfNet {
    pub fn new(cfg: &NetConfig, seed: u64) -> Self {
        let mut b = Builder::new(seed);
        let trunk = Trunk::new(&mut b, "trunk", 1, 1, cfg);
        Self {
            cfg: cfg.clone(),
            params: b.store,
            trunk,
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g>, frame: Var<'g>) -> Result<Var<'g>> {
        check_frames(&[frame], "half2half input")?;
        Ok(self.trunk.forward(b, frame))
    }
}
