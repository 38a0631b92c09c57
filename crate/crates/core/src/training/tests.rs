use ndarray::Array3;

use super::*;
use crate::ct_physics::{simulate_measurement, AcquisitionMeta};
use crate::networks::NetConfig;

fn tiny_net_cfg() -> NetConfig {
    NetConfig {
        k: 1,
        depth: 2,
        channels: 4,
        lstm_channels: 4,
        head_depth: 1,
        se_reduction: 2,
        ..NetConfig::default()
    }
}

fn tiny_data() -> (TransmissionStack, ProjectionStack) {
    let (f, r, c) = (24, 16, 20);
    let p = Array3::from_shape_fn((f, r, c), |(i, y, x)| {
        0.6 + 0.3 * ((i as f64) * 0.2 + (x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos()
    });
    let meta = AcquisitionMeta {
        tube_current: (0..f).map(|i| 50.0 + 10.0 * (i % 4) as f64).collect(),
        flux_per_ma: Some(vec![100.0; c]),
        dose_fraction: 1.0,
        electronic_variance: 4.0,
        electronic_mean: 0.0,
    };
    let clean = ProjectionStack::new(p, meta).unwrap();
    let t = crate::ct_physics::projection_to_transmission(&clean).unwrap();
    (simulate_measurement(&t, 5).unwrap(), clean)
}

fn noise_for(noisy: &TransmissionStack) -> NoiseModelParams {
    let samples: Vec<(f64, Vec<f64>)> = [50.0, 60.0, 70.0, 80.0]
        .iter()
        .map(|&m| (m, vec![100.0 * m; noisy.cols()]))
        .collect();
    let p = NoiseModelParams::init_from_samples(&samples, 4, 4.0, 1).unwrap();
    crate::noise_model::pretrain(p, &samples, &[], &Default::default()).unwrap().0
}

fn cfg(regime: Regime) -> TrainConfig {
    TrainConfig {
        regime,
        learning_rate: 1e-3,
        batch_size: Some(2),
        patch_size: 16,
        max_epochs: 2,
        steps_per_epoch: 2,
        validation_stride: 5,
        validation_patches: 3,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn new_net(regime: Regime) -> Network {
    Network::new(regime.architecture(), &tiny_net_cfg(), regime.mean_activation(), 8).unwrap()
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let (noisy, _) = tiny_data();
    let net = new_net(Regime::N2ntdAnm);
    let before = net.params().clone();
    let c = TrainConfig { max_epochs: 0, ..cfg(Regime::N2ntdAnm) };
    let noise = regime_noise_model(Regime::N2ntdAnm, Some(&noise_for(&noisy)), &noisy, true).unwrap();
    let out = train(net, noise, TrainData { noisy: &noisy, clean: None }, &c, None).unwrap();
    assert_eq!(out.network.params(), &before);
    assert!(out.log.is_empty());
}

#[test]
fn every_regime_runs_and_logs_each_epoch() {
    let (noisy, clean) = tiny_data();
    let fitted = noise_for(&noisy);
    for regime in Regime::ALL {
        let noise = regime_noise_model(regime, Some(&fitted), &noisy, true).unwrap();
        let out = train(new_net(regime), noise, TrainData { noisy: &noisy, clean: Some(&clean) }, &cfg(regime), None)
            .unwrap_or_else(|e| panic!("{regime}: {e}"));
        assert_eq!(out.log.len(), 2, "{regime}");
        assert!(out.log.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
    }
}

#[test]
fn frozen_noise_layers_stay_bit_identical() {
    let (noisy, _) = tiny_data();
    let fitted = noise_for(&noisy);
    let noise = regime_noise_model(Regime::N2ntdAnm, Some(&fitted), &noisy, true).unwrap();
    let out = train(new_net(Regime::N2ntdAnm), noise, TrainData { noisy: &noisy, clean: None }, &cfg(Regime::N2ntdAnm), None).unwrap();
    let after = out.noise_model.unwrap();
    assert_eq!(after.column_embedding, fitted.column_embedding);
    assert_eq!(after.in_weight, fitted.in_weight);
    assert_eq!(after.in_bias, fitted.in_bias);
    assert_eq!(after.out_weight, fitted.out_weight);
    assert_eq!(after.out_bias, fitted.out_bias);
    assert_ne!(after.sigma_e2_raw, fitted.sigma_e2_raw);

    let noise = regime_noise_model(Regime::N2ntdAnm, Some(&fitted), &noisy, false).unwrap();
    let out = train(new_net(Regime::N2ntdAnm), noise, TrainData { noisy: &noisy, clean: None }, &cfg(Regime::N2ntdAnm), None).unwrap();
    assert_ne!(out.noise_model.unwrap().out_weight, fitted.out_weight);
}

#[test]
fn lambda_const_model_is_flat() {
    let (noisy, _) = tiny_data();
    let m = regime_noise_model(Regime::N2ntdLambdaConst, Some(&noise_for(&noisy)), &noisy, true)
        .unwrap()
        .unwrap();
    let a = m.predict_flux_profile(50.0).unwrap();
    let b = m.predict_flux_profile(80.0).unwrap();
    assert!(a.iter().chain(&b).all(|&v| v == a[0]));
    assert!((a[0] / 6500.0 - 1.0).abs() < 0.05, "{}", a[0]);
}

#[test]
fn training_is_reproducible() {
    let (noisy, clean) = tiny_data();
    for regime in [Regime::N2ntdAnm, Regime::Half2Half, Regime::Noise2Clean] {
        let run = || {
            let noise = regime_noise_model(regime, Some(&noise_for(&noisy)), &noisy, true).unwrap();
            train(new_net(regime), noise, TrainData { noisy: &noisy, clean: Some(&clean) }, &cfg(regime), None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.network.params(), b.network.params());
        assert_eq!(a.log.iter().map(|r| r.val_loss).collect::<Vec<_>>(), b.log.iter().map(|r| r.val_loss).collect::<Vec<_>>());
    }
}

#[test]
fn mismatches_are_rejected() {
    let (noisy, _) = tiny_data();
    let fitted = noise_for(&noisy);
    let data = TrainData { noisy: &noisy, clean: None };
    let err = train(new_net(Regime::Half2Half), None, data, &cfg(Regime::N2ntdAnm), None).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    let err = train(new_net(Regime::Noise2Clean), Some(fitted.clone()), data, &cfg(Regime::Noise2Clean), None).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    let err = train(new_net(Regime::N2ntdAnm), None, data, &cfg(Regime::N2ntdAnm), None).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    let bad = TrainConfig { patch_size: 8, ..cfg(Regime::N2ntdAnm) };
    assert!(train(new_net(Regime::N2ntdAnm), Some(fitted), data, &bad, None).is_err());
}

#[test]
fn non_finite_loss_aborts_and_saves_the_batch() {
    let (mut noisy, _) = tiny_data();
    noisy.data.fill(f64::NAN);
    let dir = tempfile::tempdir().unwrap();
    let noise = noise_for(&tiny_data().0);
    let err = train(
        new_net(Regime::N2ntdAnm),
        Some(noise),
        TrainData { noisy: &noisy, clean: None },
        &cfg(Regime::N2ntdAnm),
        Some(dir.path()),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(dir.path().join("nan_batch").join("manifest.json").exists());
}

#[test]
fn graph_nll_matches_double_precision_loss() {
    let g = Graph::new();
    let y = Tensor::from_vec([1, 1, 3, 3], vec![0.5, 0.6, 0.7, 0.4, 0.5, 0.9, 0.3, 0.2, 0.8]);
    let mu = g.input(y.map(|v| v * 0.9 + 0.03));
    let s = g.input(Tensor::full([1, 1, 3, 3], 0.01));
    let lambda = vec![200.0; 9];
    let (node, d_lambda, d_se2) = anm_nll(mu, s, &y, &lambda, 3.0, &[true; 9]).unwrap();
    let mut expected = 0.0;
    let mut grad_mu = Vec::new();
    for i in 0..9 {
        let (l, gr) = nll_anm_pixel(y.data()[i] as f64, mu.value().data()[i] as f64, 0.01f32 as f64, 200.0, 3.0).unwrap();
        expected += l / 9.0;
        grad_mu.push(gr[0] / 9.0);
        assert!((d_lambda[i] - gr[2] / 9.0).abs() < 1e-12);
    }
    assert!((node.value().item() as f64 - expected).abs() < 1e-5 * expected.abs());
    assert!(d_se2.is_finite());
    let grads = g.backward(node);
    for (a, b) in grads.get(mu).unwrap().data().iter().zip(&grad_mu) {
        assert!((*a as f64 - b).abs() < 1e-4 * b.abs().max(1e-3));
    }
}

#[test]
fn graph_mse_matches_double_precision_loss() {
    let a = Array3::from_shape_fn((2, 12, 12), |(n, y, x)| ((n * 7 + y * 3 + x) % 11) as f64 * 0.1);
    let b = Array3::from_shape_fn((2, 12, 12), |(n, y, x)| ((n + y * 5 + x * 2) % 7) as f64 * 0.1);
    let to_t = |v: &Array3<f64>| Tensor::from_vec([2, 1, 12, 12], v.iter().map(|&x| x as f32).collect());
    let g = Graph::new();
    let loss = g.input(to_t(&a)).mse_masked(&to_t(&b), 4);
    let oracle = mse_loss(&a, &b, 4).unwrap();
    assert!((loss.value().item() as f64 - oracle).abs() < 1e-6);
}

#[test]
fn serialized_regime_names_match_cli_names() {
    for r in Regime::ALL {
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, format!("\"{}\"", r.name()));
        assert_eq!(serde_json::from_str::<Regime>(&s).unwrap(), r);
    }
}

#[test]
fn loss_mask_keeps_frame_edges_only() {
    let at = |row, col| data::PatchIndex { frame: 0, row, col };
    // 8×8 crops of a 8×20 frame: rows always span the frame.
    let m = loss_mask(&[at(0, 0), at(0, 5), at(0, 12)], 8, 2, 8, 20);
    let col_range = |s: usize| -> Vec<usize> { (0..8).filter(|&x| m[s * 64 + 3 * 8 + x]).collect() };
    assert_eq!(col_range(0), (0..6).collect::<Vec<_>>());
    assert_eq!(col_range(1), (2..6).collect::<Vec<_>>());
    assert_eq!(col_range(2), (2..8).collect::<Vec<_>>());
    for s in 0..3 {
        assert!(m[s * 64 + 4], "top frame row is kept");
        assert!(m[s * 64 + 7 * 8 + 4], "bottom frame row is kept");
    }
    let interior = loss_mask(&[at(3, 5)], 8, 2, 20, 20);
    assert_eq!(interior.iter().filter(|&&v| v).count(), 16);
}
