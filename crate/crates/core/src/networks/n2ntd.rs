use sinodenoise_nn::{Binder, Graph, Padding, ParamId, ParamStore, Tensor, Var};

use super::{check_frames, relative_head, variance_head, Builder, MeanActivation, NetConfig, PosteriorVars, KERNEL};
use crate::error::{validation, Result};

/// Hidden and cell maps of one ConvLSTM.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState<'g> {
    pub h: Var<'g>,
    pub c: Var<'g>,
}

impl<'g> ConvLstmState<'g> {
    pub fn zeros(graph: &'g Graph, n: usize, channels: usize, h: usize, w: usize) -> Self {
        Self {
            h: graph.constant(Tensor::zeros([n, channels, h, w])),
            c: graph.constant(Tensor::zeros([n, channels, h, w])),
        }
    }
}

/// One ConvLSTM step without peepholes. `weight` is `[4C, Cx + C, k, k]`
/// producing the input, forget, output and candidate pre-activations in
/// that order.
pub fn convlstm_step<'g>(x: Var<'g>, state: ConvLstmState<'g>, weight: Var<'g>) -> Result<ConvLstmState<'g>> {
    let [n, cx, h, w] = x.shape();
    let hs = state.h.shape();
    if state.c.shape() != hs {
        return Err(validation(format!("ConvLSTM h {:?} and c {:?} differ", hs, state.c.shape())));
    }
    let [hn, ch, hh, hw] = hs;
    if (hn, hh, hw) != (n, h, w) {
        return Err(validation(format!("ConvLSTM input {:?} does not match state {:?}", x.shape(), hs)));
    }
    let [wo, wi, kh, kw] = weight.shape();
    if wo != 4 * ch || wi != cx + ch || kh != kw || kh % 2 == 0 {
        return Err(validation(format!(
            "ConvLSTM weight {:?} does not fit input channels {cx} and state channels {ch}",
            weight.shape()
        )));
    }
    let z = Var::cat_channels(&[x, state.h]).conv2d(weight, Padding::same(kh));
    let i = z.narrow_channels(0, ch).sigmoid();
    let f = z.narrow_channels(ch, ch).sigmoid();
    let o = z.narrow_channels(2 * ch, ch).sigmoid();
    let g = z.narrow_channels(3 * ch, ch).tanh();
    let c = f.mul(state.c).add(i.mul(g));
    let h = o.mul(c.tanh());
    Ok(ConvLstmState { h, c })
}

#[derive(Clone, Debug)]
pub struct N2ntdNet {
    pub cfg: NetConfig,
    pub mean_activation: MeanActivation,
    pub params: ParamStore,
    features: Vec<ParamId>,
    lstm_fwd: ParamId,
    lstm_bwd: ParamId,
    se: [ParamId; 2],
    head: Vec<ParamId>,
}

impl N2ntdNet {
    pub fn new(cfg: &NetConfig, mean_activation: MeanActivation, seed: u64) -> Self {
        let (c, l, k) = (cfg.channels, cfg.lstm_channels, KERNEL);
        let mut b = Builder::new(seed);
        let features = (0..cfg.depth)
            .map(|i| b.conv(&format!("features.{i}"), [c, if i == 0 { 1 } else { c }, k, k], 1.0))
            .collect();
        let lstm_bound = (6.0 / (((c + l) + 4 * l) * k * k) as f32).sqrt();
        let lstm_fwd = b.uniform("lstm_fwd", [4 * l, c + l, k, k], lstm_bound);
        let lstm_bwd = b.uniform("lstm_bwd", [4 * l, c + l, k, k], lstm_bound);
        let r = (l / cfg.se_reduction).max(1);
        let se = [b.conv("se.0", [r, l, 1, 1], 1.0), b.conv("se.1", [l, r, 1, 1], 1.0)];
        let head = (0..cfg.head_depth)
            .map(|i| {
                let cin = if i == 0 { 2 * l } else { c };
                let last = i + 1 == cfg.head_depth;
                let cout = if last { 2 } else { c };
                b.conv(&format!("head.{i}"), [cout, cin, k, k], if last { 0.1 } else { 1.0 })
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            mean_activation,
            params: b.store,
            features,
            lstm_fwd,
            lstm_bwd,
            se,
            head,
        }
    }

    /// Per-frame CNN features, `[N, C, H, W]` for a `[N, 1, H, W]` input.
    pub fn feature_extractor<'g>(&self, b: &Binder<'g>, frame: Var<'g>) -> Var<'g> {
        let mut x = frame;
        for &w in &self.features {
            x = x.conv2d(b.param(w), Padding::same(KERNEL)).relu();
        }
        x
    }

    /// Squeeze-excitation gates `[N, C, 1, 1]` in `(0, 1)`.
    pub fn attention_gates<'g>(&self, b: &Binder<'g>, h: Var<'g>) -> Var<'g> {
        h.mean_hw()
            .conv2d(b.param(self.se[0]), Padding::NONE)
            .relu()
            .conv2d(b.param(self.se[1]), Padding::NONE)
            .sigmoid()
    }

    fn run_lstm<'g>(&self, b: &Binder<'g>, weight: ParamId, seq: &[Var<'g>]) -> Result<Var<'g>> {
        let [n, _, h, w] = seq[0].shape();
        let mut state = ConvLstmState::zeros(b.graph(), n, self.cfg.lstm_channels, h, w);
        for &x in seq {
            state = convlstm_step(x, state, b.param(weight))?;
        }
        Ok(state.h)
    }

    /// ConvLSTM over past features (oldest first) and over future features
    /// (farthest first), SE gating of both summaries, channel concatenation.
    pub fn temporal_fuse<'g>(&self, b: &Binder<'g>, past: &[Var<'g>], future: &[Var<'g>]) -> Result<Var<'g>> {
        if past.is_empty() || future.is_empty() {
            return Err(validation("temporal fusion needs past and future features"));
        }
        let s = past[0].shape();
        if past.iter().chain(future).any(|v| v.shape() != s) {
            return Err(validation("temporal fusion features differ in shape"));
        }
        let hf = self.run_lstm(b, self.lstm_fwd, past)?;
        let hb = self.run_lstm(b, self.lstm_bwd, future)?;
        let gf = self.attention_gates(b, hf);
        let gb = self.attention_gates(b, hb);
        Ok(Var::cat_channels(&[hf.mul_channels(gf), hb.mul_channels(gb)]))
    }

    /// `past` holds frames `i-k .. i-1`, `future` frames `i+k .. i+1`; the
    /// target frame itself is never an input.
    pub fn forward<'g>(&self, b: &Binder<'g>, past: &[Var<'g>], future: &[Var<'g>]) -> Result<PosteriorVars<'g>> {
        let k = self.cfg.k;
        if past.len() != k || future.len() != k {
            return Err(validation(format!(
                "window needs {k} past and {k} future frames, got {} and {}",
                past.len(),
                future.len()
            )));
        }
        let all: Vec<Var<'g>> = past.iter().chain(future).copied().collect();
        let [n, _, _, _] = check_frames(&all, "n2ntd window")?;
        let feats = self.feature_extractor(b, Var::cat_batch(&all));
        let split: Vec<Var<'g>> = (0..2 * k).map(|i| feats.narrow_batch(i * n, n)).collect();
        let mut x = self.temporal_fuse(b, &split[..k], &split[k..])?;
        for (i, &w) in self.head.iter().enumerate() {
            x = x.conv2d(b.param(w), Padding::same(KERNEL));
            if i + 1 < self.head.len() {
                x = x.relu();
            }
        }
        let base = Var::sum_of(&all).scale(1.0 / (2 * k) as f32);
        Ok(match self.mean_activation {
            MeanActivation::Relu => relative_head(x, base, self.cfg.variance_scale),
            MeanActivation::Identity => PosteriorVars {
                mu: x.narrow_channels(0, 1).add(base),
                sigma_x2: variance_head(x.narrow_channels(1, 1), self.cfg.variance_scale),
            },
        })
    }

    pub fn lstm_weights(&self) -> [ParamId; 2] {
        [self.lstm_fwd, self.lstm_bwd]
    }
}
