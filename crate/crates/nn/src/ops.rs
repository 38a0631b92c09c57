//! Differentiable elementwise, structural and reduction operations.

use std::rc::Rc;

use crate::graph::Var;
use crate::tensor::Tensor;

fn softplus(x: f32) -> f32 {
    // log(1 + e^x) without overflow for large x
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    /// Elementwise op whose derivative is a function of `(input, output)`.
    fn unary(self, f: impl Fn(f32) -> f32, df: fn(f32, f32) -> f32) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = Rc::clone(&y);
        self.graph().op(
            &[self],
            Rc::unwrap_or_clone(y),
            Box::new(move |g, p, _| {
                let mut d = g.clone();
                for ((d, &x), &y) in d.data_mut().iter_mut().zip(p[0].data()).zip(y_keep.data()) {
                    *d *= df(x, y);
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        self.graph()
            .op(&[self], out, Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(self, s: f32) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        self.graph()
            .op(&[self], out, Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph().op(
            &[self, other],
            out,
            Box::new(|g, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph().op(
            &[self, other],
            out,
            Box::new(|g, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph().op(
            &[self, other],
            out,
            Box::new(|g, p, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&p[1], |g, b| g * b)),
                    needs[1].then(|| g.zip_map(&p[0], |g, a| g * a)),
                ]
            }),
        )
    }

    /// Sum of several equally shaped vars.
    pub fn sum_of(vars: &[Var<'g>]) -> Var<'g> {
        assert!(!vars.is_empty(), "sum_of needs at least one term");
        let mut acc = (*vars[0].value()).clone();
        for v in &vars[1..] {
            acc.add_assign(&v.value());
        }
        vars[0].graph().op(
            vars,
            acc,
            Box::new(|g, p, needs| needs.iter().take(p.len()).map(|&n| n.then(|| g.clone())).collect()),
        )
    }

    /// Multiply `[N, C, H, W]` by per-channel gates of shape `[N, C, 1, 1]`.
    pub fn mul_channels(self, gates: Var<'g>) -> Var<'g> {
        let x = self.value();
        let s = gates.value();
        let [n, c, _, _] = x.shape();
        assert_eq!(s.shape(), [n, c, 1, 1], "mul_channels gate shape");
        let plane = x.plane_len();
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let k = s.data()[i];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        self.graph().op(
            &[self, gates],
            out,
            Box::new(move |g, p, needs| {
                let dx = needs[0].then(|| {
                    let mut d = g.clone();
                    for (i, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                        let k = p[1].data()[i];
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    d
                });
                let ds = needs[1].then(|| {
                    let data = g
                        .data()
                        .chunks(plane)
                        .zip(p[0].data().chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(p[1].shape(), data)
                });
                vec![dx, ds]
            }),
        )
    }

    /// Global average pool to `[N, C, 1, 1]`.
    pub fn mean_hw(self) -> Var<'g> {
        let x = self.value();
        let [n, c, _, _] = x.shape();
        let plane = x.plane_len();
        let data = x
            .data()
            .chunks(plane)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let shape = x.shape();
        self.graph().op(
            &[self],
            Tensor::from_vec([n, c, 1, 1], data),
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(shape);
                for (i, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                    chunk.fill(g.data()[i] / plane as f32);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Mean of all elements as a `[1, 1, 1, 1]` scalar.
    pub fn mean_all(self) -> Var<'g> {
        let x = self.value();
        let n = x.numel();
        let shape = x.shape();
        let m = (x.sum() / n as f64) as f32;
        self.graph().op(
            &[self],
            Tensor::scalar(m),
            Box::new(move |g, _, _| vec![Some(Tensor::full(shape, g.item() / n as f32))]),
        )
    }

    pub fn cat_channels(vars: &[Var<'g>]) -> Var<'g> {
        assert!(!vars.is_empty(), "cat_channels of nothing");
        let vals: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let [n, _, h, w] = vals[0].shape();
        let chans: Vec<usize> = vals.iter().map(|t| t.c()).collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for t in &vals {
                assert_eq!([n, h, w], [t.n(), t.h(), t.w()], "cat_channels shape mismatch");
                let len = t.item_len();
                data.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
            }
        }
        vars[0].graph().op(
            vars,
            Tensor::from_vec([n, total, h, w], data),
            Box::new(move |g, _, needs| {
                let mut outs: Vec<Vec<f32>> = chans.iter().map(|c| Vec::with_capacity(n * c * plane)).collect();
                for b in 0..n {
                    let mut off = b * total * plane;
                    for (o, &c) in outs.iter_mut().zip(&chans) {
                        o.extend_from_slice(&g.data()[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                outs.into_iter()
                    .zip(&chans)
                    .zip(needs)
                    .map(|((d, &c), &need)| need.then(|| Tensor::from_vec([n, c, h, w], d)))
                    .collect()
            }),
        )
    }

    pub fn narrow_channels(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        assert!(start + len <= c, "narrow_channels out of range");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + len * plane]);
        }
        self.graph().op(
            &[self],
            Tensor::from_vec([n, len, h, w], data),
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    let base = (b * c + start) * plane;
                    d.data_mut()[base..base + len * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn cat_batch(vars: &[Var<'g>]) -> Var<'g> {
        assert!(!vars.is_empty(), "cat_batch of nothing");
        let vals: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let counts: Vec<usize> = vals.iter().map(|t| t.n()).collect();
        let stacked = Tensor::stack(&vals.iter().map(|t| (**t).clone()).collect::<Vec<_>>());
        vars[0].graph().op(
            vars,
            stacked,
            Box::new(move |g, _, needs| {
                let mut start = 0;
                counts
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let s = need.then(|| g.batch_slice(start, c));
                        start += c;
                        s
                    })
                    .collect()
            }),
        )
    }

    pub fn narrow_batch(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        let item = x.item_len();
        self.graph().op(
            &[self],
            x.batch_slice(start, len),
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(shape);
                d.data_mut()[start * item..(start + len) * item].copy_from_slice(g.data());
                vec![Some(d)]
            }),
        )
    }

    /// Rotate every plane by `k × 90°` counter-clockwise.
    pub fn rot90(self, k: usize) -> Var<'g> {
        let k = k % 4;
        let out = rot90_tensor(&self.value(), k);
        self.graph().op(
            &[self],
            out,
            Box::new(move |g, _, _| vec![Some(rot90_tensor(g, (4 - k) % 4))]),
        )
    }

    /// Move every plane down by `rows`, filling the top with zeros and
    /// dropping the bottom rows.
    pub fn shift_down(self, rows: usize) -> Var<'g> {
        let x = self.value();
        let out = shift_rows(&x, rows as isize);
        self.graph().op(
            &[self],
            out,
            Box::new(move |g, _, _| vec![Some(shift_rows(g, -(rows as isize)))]),
        )
    }

    /// Masked mean squared error against a constant target. Pixels closer
    /// than `margin` to a plane border are excluded.
    pub fn mse_masked(self, target: &Tensor, margin: usize) -> Var<'g> {
        let [n, _, h, w] = self.value().shape();
        let plane = border_mask(h, w, margin);
        assert!(plane.iter().any(|&m| m), "margin {margin} leaves no pixels in {h}x{w}");
        let mask: Vec<bool> = (0..n).flat_map(|_| plane.iter().copied()).collect();
        self.mse_where(target, &mask)
    }

    /// Mean squared error over the pixels where `mask` (one entry per
    /// sample and pixel, shared by channels) is set.
    pub fn mse_where(self, target: &Tensor, mask: &[bool]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "mse target shape mismatch");
        let [n, c, _, _] = x.shape();
        let plane = x.plane_len();
        assert_eq!(mask.len(), n * plane, "mask must hold one entry per sample pixel");
        let count = mask.iter().filter(|&&m| m).count() * c;
        assert!(count > 0, "mask selects no pixels");
        let mut sum = 0.0f64;
        let mut grad = Tensor::zeros(x.shape());
        for (i, ((&a, &b), d)) in x.data().iter().zip(target.data()).zip(grad.data_mut()).enumerate() {
            if mask[(i / (c * plane)) * plane + i % plane] {
                let e = (a - b) as f64;
                sum += e * e;
                *d = (2.0 * e / count as f64) as f32;
            }
        }
        let grad = Rc::new(grad);
        self.graph().op(
            &[self],
            Tensor::scalar((sum / count as f64) as f32),
            Box::new(move |g, _, _| {
                let s = g.item();
                vec![Some(grad.map(|v| v * s))]
            }),
        )
    }
}

/// `true` where a pixel lies at least `margin` away from every border.
pub fn border_mask(h: usize, w: usize, margin: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            y >= margin && x >= margin && y + margin < h && x + margin < w
        })
        .collect()
}

pub fn rot90_tensor(x: &Tensor, k: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let plane = h * w;
    for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for i in 0..oh {
            for j in 0..ow {
                // Counter-clockwise: out(i, j) pulls from the input position
                // that lands on (i, j).
                let (y, xx) = match k % 4 {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                dst[i * ow + j] = src[y * w + xx];
            }
        }
    }
    out
}

fn shift_rows(x: &Tensor, rows: isize) -> Tensor {
    let [_, _, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for y in 0..h as isize {
            let sy = y - rows;
            if sy >= 0 && sy < h as isize {
                dst[y as usize * w..(y as usize + 1) * w]
                    .copy_from_slice(&src[sy as usize * w..(sy as usize + 1) * w]);
            }
        }
    }
    out
}
