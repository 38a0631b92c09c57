//! Bias-free stride-1 2-D convolution (cross-correlation) via im2col and
//! sgemm, with independent padding on every side.

use crate::graph::Var;
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    /// Output has the input's size for an odd `k × k` kernel.
    pub fn same(k: usize) -> Self {
        let p = k / 2;
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Output row `r` sees input rows `r - (k - 1) ..= r` only.
    pub fn causal_down(k: usize) -> Self {
        Padding {
            top: k - 1,
            bottom: 0,
            left: k / 2,
            right: k / 2,
        }
    }
}

struct Geometry {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad: Padding,
}

impl Geometry {
    fn new(x: &Tensor, w: &Tensor, pad: Padding) -> Self {
        let [_, ci, h, wd] = x.shape();
        let [co, wci, kh, kw] = w.shape();
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
        assert!(
            h + pad.top + pad.bottom >= kh && wd + pad.left + pad.right >= kw,
            "conv2d: kernel larger than padded input"
        );
        Geometry {
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            ho: h + pad.top + pad.bottom + 1 - kh,
            wo: wd + pad.left + pad.right + 1 - kw,
            pad,
        }
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 kernels on unpadded input need no im2col buffer.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == Padding::NONE
    }

    /// Valid output column range for kernel column `dx`.
    fn x_range(&self, dx: usize) -> (usize, usize) {
        let lo = self.pad.left.saturating_sub(dx);
        let hi = (self.w + self.pad.left).saturating_sub(dx).min(self.wo);
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.p();
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (c * self.kh + dy) * self.kw + dx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (x0, x1) = self.x_range(dx);
                    for oy in 0..self.ho {
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = oy as isize + dy as isize - self.pad.top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..x0].fill(0.0);
                        out[x1..].fill(0.0);
                        if x1 == x0 {
                            continue;
                        }
                        let ix0 = x0 + dx - self.pad.left;
                        out[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], dx_out: &mut [f32]) {
        let p = self.p();
        for c in 0..self.ci {
            let plane = &mut dx_out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (c * self.kh + dy) * self.kw + dx;
                    let src = &cols[row * p..(row + 1) * p];
                    let (x0, x1) = self.x_range(dx);
                    for oy in 0..self.ho {
                        let iy = oy as isize + dy as isize - self.pad.top as isize;
                        if iy < 0 || iy >= self.h as isize || x1 == x0 {
                            continue;
                        }
                        let ix0 = x0 + dx - self.pad.left;
                        let dst = &mut plane[iy as usize * self.w + ix0..][..x1 - x0];
                        for (d, s) in dst.iter_mut().zip(&src[oy * self.wo + x0..oy * self.wo + x1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`,
    // checked by the callers' shape arithmetic; `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, pad: Padding) -> Tensor {
    let g = Geometry::new(x, w, pad);
    let n = x.n();
    let (k, p) = (g.k(), g.p());
    let in_len = x.item_len();
    let out_len = g.co * p;
    let mut out = Tensor::zeros([n, g.co, g.ho, g.wo]);
    par::for_each_chunk_mut(out.data_mut(), out_len, |i, dst| {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.co, k, p, w.data(), (k as isize, 1), xi, (p as isize, 1), dst, false);
        } else {
            let mut cols = vec![0.0f32; k * p];
            g.im2col(xi, &mut cols);
            gemm(g.co, k, p, w.data(), (k as isize, 1), &cols, (p as isize, 1), dst, false);
        }
    });
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    pad: Padding,
    grad_out: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = Geometry::new(x, w, pad);
    let n = x.n();
    let (k, p) = (g.k(), g.p());
    let in_len = x.item_len();
    let out_len = g.co * p;
    let wlen = w.numel();

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw_parts = if need_dw { vec![0.0f32; n * wlen] } else { Vec::new() };

    let work = |i: usize, dx_i: Option<&mut [f32]>, dw_i: Option<&mut [f32]>| {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let go = &grad_out.data()[i * out_len..(i + 1) * out_len];
        let owned;
        let cols: &[f32] = if g.is_pointwise() {
            xi
        } else if dw_i.is_some() {
            let mut c = vec![0.0f32; k * p];
            g.im2col(xi, &mut c);
            owned = c;
            &owned
        } else {
            &[]
        };
        if let Some(dw_i) = dw_i {
            // dW[co×k] = dOut[co×p] · colsᵀ[p×k]
            gemm(g.co, p, k, go, (p as isize, 1), cols, (1, p as isize), dw_i, false);
        }
        if let Some(dx_i) = dx_i {
            if g.is_pointwise() {
                // dX[k×p] = Wᵀ[k×co] · dOut[co×p]
                gemm(k, g.co, p, w.data(), (1, k as isize), go, (p as isize, 1), dx_i, false);
            } else {
                let mut dcols = vec![0.0f32; k * p];
                gemm(k, g.co, p, w.data(), (1, k as isize), go, (p as isize, 1), &mut dcols, false);
                g.col2im_add(&dcols, dx_i);
            }
        }
    };

    match (dx.as_mut(), need_dw) {
        (Some(dx), true) => par::for_each_chunk_pair_mut(dx.data_mut(), in_len, &mut dw_parts, wlen, |i, a, b| {
            work(i, Some(a), Some(b))
        }),
        (Some(dx), false) => par::for_each_chunk_mut(dx.data_mut(), in_len, |i, a| work(i, Some(a), None)),
        (None, true) => par::for_each_chunk_mut(&mut dw_parts, wlen, |i, b| work(i, None, Some(b))),
        (None, false) => {}
    }

    let dw = need_dw.then(|| {
        let mut acc = vec![0.0f32; wlen];
        for part in dw_parts.chunks(wlen) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
        Tensor::from_vec(w.shape(), acc)
    });
    (dx, dw)
}

impl<'g> Var<'g> {
    /// Convolve with `weight` of shape `[out, in, kh, kw]`; no bias.
    pub fn conv2d(self, weight: Var<'g>, pad: Padding) -> Var<'g> {
        let out = conv2d_forward(&self.value(), &weight.value(), pad);
        self.graph().op(
            &[self, weight],
            out,
            Box::new(move |g, parents, needs| {
                let (dx, dw) = conv2d_backward(&parents[0], &parents[1], pad, g, needs[0], needs[1]);
                vec![dx, dw]
            }),
        )
    }
}
