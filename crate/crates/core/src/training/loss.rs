//! Losses in double precision with analytic gradients.

use ndarray::Array3;
use sinodenoise_nn::ops::border_mask;

use crate::error::{domain, validation, Result};

/// Gradients of the mean NLL with respect to each per-pixel input.
#[derive(Clone, Debug, PartialEq)]
pub struct NllGrads {
    pub mu_x: Vec<f64>,
    pub sigma_x2: Vec<f64>,
    pub sigma_n2: Vec<f64>,
}

fn check_lengths(n: usize, others: &[usize]) -> Result<()> {
    if n == 0 {
        return Err(validation("loss over zero pixels"));
    }
    if others.iter().any(|&m| m != n) {
        return Err(validation("loss inputs differ in length"));
    }
    Ok(())
}

/// Negative log-likelihood of one pixel under `N(μx, σx² + σn²)`, without
/// the constant.
pub fn nll_pixel(y: f64, mu_x: f64, sigma_x2: f64, sigma_n2: f64) -> Result<f64> {
    let s = sigma_x2 + sigma_n2;
    if !(s > 0.0) {
        return Err(domain(format!("total variance must be positive, got {s}")));
    }
    let r = y - mu_x;
    Ok(r * r / (2.0 * s) + 0.5 * s.ln())
}

/// Mean NLL over pixels.
pub fn nll_loss(y: &[f64], mu_x: &[f64], sigma_x2: &[f64], sigma_n2: &[f64]) -> Result<f64> {
    Ok(nll_loss_grad(y, mu_x, sigma_x2, sigma_n2)?.0)
}

/// Mean NLL and its gradient.
pub fn nll_loss_grad(y: &[f64], mu_x: &[f64], sigma_x2: &[f64], sigma_n2: &[f64]) -> Result<(f64, NllGrads)> {
    let n = y.len();
    check_lengths(n, &[mu_x.len(), sigma_x2.len(), sigma_n2.len()])?;
    let inv = 1.0 / n as f64;
    let mut g = NllGrads {
        mu_x: vec![0.0; n],
        sigma_x2: vec![0.0; n],
        sigma_n2: vec![0.0; n],
    };
    let mut total = 0.0;
    for i in 0..n {
        total += nll_pixel(y[i], mu_x[i], sigma_x2[i], sigma_n2[i])?;
        let s = sigma_x2[i] + sigma_n2[i];
        let r = y[i] - mu_x[i];
        g.mu_x[i] = -r / s * inv;
        let ds = (0.5 / s - r * r / (2.0 * s * s)) * inv;
        g.sigma_x2[i] = ds;
        g.sigma_n2[i] = ds;
    }
    Ok((total * inv, g))
}

/// One pixel of the NLL with `σn² = μx/λ + σe²/λ²`, and its gradient with
/// respect to `(μx, σx², λ, σe²)`. `μx` enters both the residual and the
/// signal-dependent noise term.
pub fn nll_anm_pixel(y: f64, mu_x: f64, sigma_x2: f64, lambda: f64, sigma_e2: f64) -> Result<(f64, [f64; 4])> {
    if !(lambda > 0.0) {
        return Err(domain(format!("λ must be positive, got {lambda}")));
    }
    let sn2 = mu_x / lambda + sigma_e2 / (lambda * lambda);
    let loss = nll_pixel(y, mu_x, sigma_x2, sn2)?;
    let s = sigma_x2 + sn2;
    let r = y - mu_x;
    let ds = 0.5 / s - r * r / (2.0 * s * s);
    let d_mu = -r / s + ds / lambda;
    let d_lambda = ds * (-mu_x / (lambda * lambda) - 2.0 * sigma_e2 / (lambda * lambda * lambda));
    let d_se2 = ds / (lambda * lambda);
    Ok((loss, [d_mu, ds, d_lambda, d_se2]))
}

/// Mean squared error over pixels at least `margin` from every border of
/// each `[n, h, w]` plane.
pub fn mse_loss(pred: &Array3<f64>, target: &Array3<f64>, margin: usize) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(validation(format!("mse shapes {:?} and {:?} differ", pred.dim(), target.dim())));
    }
    let (n, h, w) = pred.dim();
    let mask = border_mask(h, w, margin);
    let count = mask.iter().filter(|&&m| m).count() * n;
    if count == 0 {
        return Err(validation(format!("margin {margin} leaves no pixels in {h}x{w}")));
    }
    let mut acc = 0.0;
    for ((i, &p), &t) in pred.iter().enumerate().zip(target.iter()) {
        if mask[i % (h * w)] {
            acc += (p - t) * (p - t);
        }
    }
    Ok(acc / count as f64)
}
