#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// A run small enough to push every command through in seconds.
pub const TINY_CONFIG: &str = r#"
seed = 5
alphas = [0.25, 0.05]
regimes = ["n2ntd_anm", "noise2void_4r", "half2half", "noise2clean"]
train_alphas = [0.25]
batch_frames = 3

[bench]
phantom_size = 32
n_angles = 24
n_detector_cols = 48
detector_rows = 16
field_of_view = 3.0

[noise]
epochs = 200
max_currents = 10

[network]
k = 3
depth = 2
channels = 4
lstm_channels = 4
head_depth = 2
se_reduction = 2

[train]
patch_size = 16
max_epochs = 2
steps_per_epoch = 2
validation_stride = 6
validation_patches = 4
loss_margin = 1
batch_size = 2

[evaluate]
plot_frames = [3]

[cross_test]
train_alphas = [0.25]
test_alphas = [0.25, 0.05]
regimes = ["n2ntd_anm", "noise2clean", "n2ntd_mse_ablation"]
"#;

pub const COMMANDS: [&str; 7] = ["simulate", "pretrain-noise", "train", "denoise", "reconstruct", "evaluate", "cross-test"];

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sinodenoise")
}

pub fn sinodenoise(config: &Path, out: &Path, args: &[&str], workers: Option<usize>) -> Output {
    let mut cmd = Command::new(bin());
    cmd.arg(args[0]).arg("--config").arg(config).arg("--out").arg(out).args(&args[1..]);
    if let Some(w) = workers {
        cmd.env("SINODENOISE_WORKERS", w.to_string());
    }
    cmd.env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into()));
    cmd.output().expect("run sinodenoise")
}
