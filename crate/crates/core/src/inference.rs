//! Posterior-mean combination and whole-stack denoising.

use ndarray::Array3;
use sinodenoise_nn::{Graph, Tensor, Var};

use crate::ct_physics::{transmission_to_projection, ProjectionStack, TransmissionStack, TRANSMISSION_CLAMP};
use crate::error::{validation, Error, Result};
use crate::networks::{bind, MeanActivation, Network};
use crate::noise_model::NoiseModelParams;
use crate::par;
use crate::training::NoiseLevels;

/// `(y·σx² + μx·σn²) / (σx² + σn²)`, evaluated as `y + (μx - y)·w` so that
/// `σn² = 0` returns `y` exactly.
pub fn posterior_mean(y: f64, mu_x: f64, sigma_x2: f64, sigma_n2: f64) -> f64 {
    let s = sigma_x2 + sigma_n2;
    assert!(s > 0.0, "posterior mean needs positive total variance, got {s}");
    y + (mu_x - y) * (sigma_n2 / s)
}

/// How [`denoise_stack`] treats the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DenoiseMode {
    #[default]
    Model,
    /// Skip the network and return the noisy input in the projection
    /// domain; exercises windowing and domain conversion only.
    Passthrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiseOptions {
    pub mode: DenoiseMode,
    /// Frames per forward pass.
    pub batch_frames: usize,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        Self {
            mode: DenoiseMode::Model,
            batch_frames: 4,
        }
    }
}

/// Neighbour frame indices of target `i`: past `i-k .. i-1`, future
/// `i+k .. i+1`. Indices outside the stack are mirrored through `i`, so the
/// target frame never appears in its own window.
pub fn window_indices(frames: usize, i: usize, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if frames < 2 * k + 1 {
        return Err(Error::Dataset(format!(
            "{frames} frames are fewer than the {} a window needs",
            2 * k + 1
        )));
    }
    let pick = |j: isize| -> usize {
        let j = if j < 0 || j >= frames as isize { 2 * i as isize - j } else { j };
        j as usize
    };
    let i = i as isize;
    let past = (1..=k as isize).rev().map(|d| pick(i - d)).collect();
    let future = (1..=k as isize).rev().map(|d| pick(i + d)).collect();
    Ok((past, future))
}

fn stack_frames(data: &Array3<f64>, ids: &[usize], map: impl Fn(f64) -> f64) -> Tensor {
    let (_, r, c) = data.dim();
    let mut v = Vec::with_capacity(ids.len() * r * c);
    for &f in ids {
        v.extend(data.index_axis(ndarray::Axis(0), f).iter().map(|&x| map(x) as f32));
    }
    Tensor::from_vec([ids.len(), 1, r, c], v)
}

fn to_projection(t: f64) -> f64 {
    -t.max(TRANSMISSION_CLAMP).ln()
}

/// Denoise every frame of `noisy` and return projections. NLL-trained
/// networks are combined with the noisy frame by the posterior mean, with
/// `σn²` from `noise` (or from the recorded flux when `noise` is `None`);
/// the other networks' outputs are used directly.
pub fn denoise_stack(
    net: &Network,
    noise: Option<&NoiseModelParams>,
    noisy: &TransmissionStack,
    opts: DenoiseOptions,
) -> Result<ProjectionStack> {
    let (frames, rows, cols) = noisy.data.dim();
    let k = match net {
        Network::N2ntd(_) | Network::Noise2Clean(_) => net.config().k,
        _ => 0,
    };
    window_indices(frames, 0, k)?;
    if opts.batch_frames == 0 {
        return Err(validation("batch_frames must be positive"));
    }
    if opts.mode == DenoiseMode::Passthrough {
        let (p, _) = transmission_to_projection(noisy);
        return Ok(p);
    }
    let needs_levels = matches!(net, Network::BlindSpot4r(_) | Network::Noise2Clean(_))
        || matches!(net, Network::N2ntd(n) if n.mean_activation == MeanActivation::Relu);
    let levels = if needs_levels {
        Some(match noise {
            Some(m) => {
                if m.n_cols() != cols {
                    return Err(validation("noise model column count does not match the stack"));
                }
                NoiseLevels::from_model(m, &noisy.meta)?
            }
            None => NoiseLevels::from_meta(&noisy.meta)?,
        })
    } else {
        None
    };
    let data = &noisy.data;
    let chunks = frames.div_ceil(opts.batch_frames);
    let plane = rows * cols;
    let results = par::map_range(chunks, |c| -> Result<Vec<f64>> {
        let ids: Vec<usize> = (c * opts.batch_frames..((c + 1) * opts.batch_frames).min(frames)).collect();
        denoise_chunk(net, levels.as_ref(), data, &ids, k, plane)
    });
    let mut out = Vec::with_capacity(frames * plane);
    for r in results {
        out.extend(r?);
    }
    ProjectionStack::new(
        Array3::from_shape_vec((frames, rows, cols), out).expect("frame-sized chunks"),
        noisy.meta.clone(),
    )
}

fn denoise_chunk(
    net: &Network,
    levels: Option<&NoiseLevels>,
    data: &Array3<f64>,
    ids: &[usize],
    k: usize,
    plane: usize,
) -> Result<Vec<f64>> {
    let (frames, _, cols) = data.dim();
    let g = Graph::new();
    let windows = ids.iter().map(|&i| window_indices(frames, i, k)).collect::<Result<Vec<_>>>()?;
    let neighbour_stacks = |domain: fn(f64) -> f64| -> (Vec<Var>, Vec<Var>) {
        let past = (0..k)
            .map(|j| g.constant(stack_frames(data, &windows.iter().map(|w| w.0[j]).collect::<Vec<_>>(), domain)))
            .collect();
        let future = (0..k)
            .map(|j| g.constant(stack_frames(data, &windows.iter().map(|w| w.1[j]).collect::<Vec<_>>(), domain)))
            .collect();
        (past, future)
    };
    let identity: fn(f64) -> f64 = |v| v;
    let params = net.params();
    let b = bind(&g, params, false);
    let mut out = Vec::with_capacity(ids.len() * plane);
    let posterior = |mu: &Tensor, sx2: &Tensor, out: &mut Vec<f64>| {
        let levels = levels.expect("levels prepared for posterior networks");
        for (n, &f) in ids.iter().enumerate() {
            let y = data.index_axis(ndarray::Axis(0), f);
            for (j, &yv) in y.iter().enumerate() {
                let m = mu.data()[n * plane + j] as f64;
                let s = sx2.data()[n * plane + j] as f64;
                let sn2 = levels.sigma_n2(m, f, j % cols);
                out.push(to_projection(posterior_mean(yv, m, s, sn2)));
            }
        }
    };
    match net {
        Network::N2ntd(n) if n.mean_activation == MeanActivation::Relu => {
            let (past, future) = neighbour_stacks(identity);
            let p = n.forward(&b, &past, &future)?;
            posterior(&p.mu.value(), &p.sigma_x2.value(), &mut out);
        }
        Network::N2ntd(n) => {
            let (past, future) = neighbour_stacks(to_projection);
            let p = n.forward(&b, &past, &future)?;
            out.extend(p.mu.value().data().iter().map(|&v| v as f64));
        }
        Network::BlindSpot4r(n) => {
            let p = n.forward(&b, g.constant(stack_frames(data, ids, identity)))?;
            posterior(&p.mu.value(), &p.sigma_x2.value(), &mut out);
        }
        Network::Half2Half(n) => {
            let y = n.forward(&b, g.constant(stack_frames(data, ids, identity)))?;
            out.extend(y.value().data().iter().map(|&v| to_projection(v as f64)));
        }
        Network::Noise2Clean(n) => {
            let levels = levels.expect("levels prepared for noise2clean");
            let (past, future) = neighbour_stacks(to_projection);
            let center = stack_frames(data, ids, to_projection);
            let mut map = center.clone();
            for (s, &f) in ids.iter().enumerate() {
                let y = data.index_axis(ndarray::Axis(0), f);
                for (j, &t) in y.iter().enumerate() {
                    map.data_mut()[s * plane + j] =
                        levels.projection_sigma(t.max(TRANSMISSION_CLAMP), f, j % cols) as f32 * n.cfg.noise_map_gain;
                }
            }
            let neighbours: Vec<Var> = past.into_iter().chain(future).collect();
            let y = n.forward(&b, g.constant(center), &neighbours, Some(g.constant(map)))?;
            out.extend(y.value().data().iter().map(|&v| v as f64));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ct_physics::AcquisitionMeta;
    use crate::networks::{Architecture, NetConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn posterior_examples() {
        assert_abs_diff_eq!(posterior_mean(0.9, 0.4, 1e-12, 0.01), 0.4, epsilon = 1e-8);
        assert_eq!(posterior_mean(0.9, 0.4, 0.02, 0.0), 0.9);
        let v = posterior_mean(0.5, 0.4, 0.01, 0.03);
        assert!((v - 0.425).abs() <= 1e-9 * 0.425);
    }

    proptest! {
        #[test]
        fn posterior_is_convex_and_monotone(
            y in -1.0f64..2.0, mu in 0.0f64..2.0, sx2 in 1e-8f64..1.0, sn2 in 0.0f64..1.0, dy in 1e-3f64..1.0,
        ) {
            let v = posterior_mean(y, mu, sx2, sn2);
            let tol = 1e-12;
            prop_assert!(v >= y.min(mu) - tol && v <= y.max(mu) + tol);
            let slope = (posterior_mean(y + dy, mu, sx2, sn2) - v) / dy;
            let analytic = sx2 / (sx2 + sn2);
            prop_assert!((0.0..=1.0).contains(&analytic));
            prop_assert!((slope - analytic).abs() < 1e-6);
        }
    }

    #[test]
    fn windows_mirror_at_the_edges() {
        assert_eq!(window_indices(10, 0, 3).unwrap(), (vec![3, 2, 1], vec![3, 2, 1]));
        assert_eq!(window_indices(10, 1, 3).unwrap(), (vec![4, 3, 0], vec![4, 3, 2]));
        assert_eq!(window_indices(10, 5, 3).unwrap(), (vec![2, 3, 4], vec![8, 7, 6]));
        assert_eq!(window_indices(10, 9, 2).unwrap(), (vec![7, 8], vec![7, 8]));
        for i in 0..10 {
            let (p, f) = window_indices(10, i, 3).unwrap();
            assert!(!p.contains(&i) && !f.contains(&i));
        }
        assert!(matches!(window_indices(6, 0, 3), Err(Error::Dataset(_))));
    }

    fn stack(frames: usize, i0: f64) -> TransmissionStack {
        let (r, c) = (6, 9);
        let t = Array3::from_shape_fn((frames, r, c), |(f, y, x)| 0.3 + 0.05 * ((f + y + x) % 7) as f64);
        let meta = AcquisitionMeta {
            tube_current: vec![1.0; frames],
            flux_per_ma: Some(vec![i0; c]),
            dose_fraction: 1.0,
            electronic_variance: 0.0,
            electronic_mean: 0.0,
        };
        TransmissionStack::new(t, meta).unwrap()
    }

    fn small(arch: Architecture, mean: MeanActivation) -> Network {
        let cfg = NetConfig {
            k: 2,
            depth: 2,
            channels: 4,
            lstm_channels: 4,
            head_depth: 1,
            se_reduction: 2,
            ..NetConfig::default()
        };
        Network::new(arch, &cfg, mean, 1).unwrap()
    }

    #[test]
    fn passthrough_returns_the_noisy_projection() {
        let s = stack(7, 1e12);
        let net = small(Architecture::N2ntd, MeanActivation::Relu);
        let opts = DenoiseOptions {
            mode: DenoiseMode::Passthrough,
            ..Default::default()
        };
        let out = denoise_stack(&net, None, &s, opts).unwrap();
        assert_eq!(out.frames(), 7);
        for (p, t) in out.data.iter().zip(s.data.iter()) {
            assert!((p + t.ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn every_architecture_keeps_the_frame_count_and_is_deterministic() {
        let s = stack(9, 1e4);
        for (arch, mean) in [
            (Architecture::N2ntd, MeanActivation::Relu),
            (Architecture::N2ntd, MeanActivation::Identity),
            (Architecture::BlindSpot4r, MeanActivation::Relu),
            (Architecture::Noise2Clean, MeanActivation::Relu),
            (Architecture::Half2Half, MeanActivation::Relu),
        ] {
            let net = small(arch, mean);
            let opts = DenoiseOptions {
                batch_frames: 4,
                ..Default::default()
            };
            let a = denoise_stack(&net, None, &s, opts).unwrap();
            assert_eq!(a.data.dim(), s.data.dim(), "{arch}");
            assert!(a.data.iter().all(|v| v.is_finite()));
            let b = denoise_stack(&net, None, &s, DenoiseOptions { batch_frames: 3, ..opts }).unwrap();
            assert_eq!(a.data, b.data, "{arch}");
        }
    }

    #[test]
    fn too_few_frames_is_a_dataset_error() {
        let s = stack(4, 1e4);
        let net = small(Architecture::N2ntd, MeanActivation::Relu);
        assert!(matches!(denoise_stack(&net, None, &s, Default::default()), Err(Error::Dataset(_))));
    }
}
