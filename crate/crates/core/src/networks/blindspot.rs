use sinodenoise_nn::{Binder, Padding, ParamId, ParamStore, Tensor, Var};

use super::{check_frames, relative_head, Builder, NetConfig, PosteriorVars, KERNEL};
use crate::error::Result;

/// Four-rotation blind-spot network. One causal branch (each output row
/// sees only input rows at or above it, then a one-row shift makes that
/// strictly above) runs on the frame rotated by 0°, 90°, 180° and 270°;
/// de-rotated branch outputs cover the four half-planes around a pixel and
/// never the pixel itself.
#[derive(Clone, Debug)]
pub struct BlindSpotNet {
    pub cfg: NetConfig,
    pub params: ParamStore,
    branch: Vec<ParamId>,
    combine: [ParamId; 2],
}

impl BlindSpotNet {
    pub fn new(cfg: &NetConfig, seed: u64) -> Self {
        let (c, k) = (cfg.channels, KERNEL);
        let mut b = Builder::new(seed);
        let branch = (0..cfg.depth)
            .map(|i| b.conv(&format!("branch.{i}"), [c, if i == 0 { 1 } else { c }, k, k], 1.0))
            .collect();
        let combine = [
            b.conv("combine.0", [c, 4 * c, 1, 1], 1.0),
            b.conv("combine.1", [2, c, 1, 1], 0.1),
        ];
        Self {
            cfg: cfg.clone(),
            params: b.store,
            branch,
            combine,
        }
    }

    fn branch<'g>(&self, b: &Binder<'g>, x: Var<'g>) -> Var<'g> {
        let mut y = x;
        for &w in &self.branch {
            y = y.conv2d(b.param(w), Padding::causal_down(KERNEL)).relu();
        }
        y.shift_down(1)
    }

    pub fn forward<'g>(&self, b: &Binder<'g>, frame: Var<'g>) -> Result<PosteriorVars<'g>> {
        let [n, _, h, w] = check_frames(&[frame], "blind-spot input")?;
        let branches: Vec<Var<'g>> = if h == w {
            let rotated: Vec<Var<'g>> = (0..4).map(|r| frame.rot90(r)).collect();
            let out = self.branch(b, Var::cat_batch(&rotated));
            (0..4).map(|r| out.narrow_batch(r * n, n).rot90((4 - r) % 4)).collect()
        } else {
            (0..4).map(|r| self.branch(b, frame.rot90(r)).rot90((4 - r) % 4)).collect()
        };
        let z = Var::cat_channels(&branches)
            .conv2d(b.param(self.combine[0]), Padding::NONE)
            .relu()
            .conv2d(b.param(self.combine[1]), Padding::NONE);
        let cross = b.graph().constant(Tensor::from_vec(
            [1, 1, 3, 3],
            vec![0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0],
        ));
        let base = frame.conv2d(cross, Padding::same(3));
        Ok(relative_head(z, base, self.cfg.variance_scale))
    }
}
