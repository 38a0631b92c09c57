use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use sinodenoise::pipeline::{self, ExperimentConfig, Run};
use sinodenoise::training::Regime;
use sinodenoise::{par, Error, Result};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Simulate,
    PretrainNoise,
    Train,
    Denoise,
    Reconstruct,
    Evaluate,
    CrossTest,
}

/// Self-supervised denoising of low-dose CT projections.
#[derive(Debug, Parser)]
#[command(name = "sinodenoise", version)]
struct Cli {
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict train/denoise to these regimes (repeatable).
    #[arg(long, value_parser = parse_regime)]
    regime: Vec<Regime>,
    /// Restrict train/denoise to these training dose fractions (repeatable).
    #[arg(long)]
    alpha: Vec<f64>,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    Regime::ALL
        .iter()
        .copied()
        .find(|r| r.name() == s)
        .ok_or_else(|| format!("unknown regime {s}; expected one of {}", names()))
}

fn names() -> String {
    Regime::ALL.iter().map(|r| r.name()).collect::<Vec<_>>().join(", ")
}

fn workers_from_env() -> Result<()> {
    if let Ok(v) = std::env::var("SINODENOISE_WORKERS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("SINODENOISE_WORKERS must be a positive integer, got {v:?}")))?;
        par::init_workers(n);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    workers_from_env()?;
    let cfg = ExperimentConfig::load(&cli.config)?;
    let run = Run::new(cfg, cli.out.clone(), cli.seed)?;
    let grid: Vec<(Regime, f64)> = run
        .model_grid()
        .into_iter()
        .filter(|(r, _)| cli.regime.is_empty() || cli.regime.contains(r))
        .filter(|(_, a)| cli.alpha.is_empty() || cli.alpha.iter().any(|b| (a - b).abs() < 1e-12))
        .collect();
    match cli.command {
        Command::Simulate => {
            for p in pipeline::simulate(&run)? {
                println!("{}", p.display());
            }
        }
        Command::PretrainNoise => {
            let r = pipeline::pretrain_noise(&run)?;
            println!(
                "train RMSRE {:.4}%  held-out RMSRE {}",
                r.fit.train_rmsre,
                r.fit.heldout_rmsre.map_or("n/a".into(), |v| format!("{v:.4}%"))
            );
        }
        Command::Train => {
            if grid.is_empty() {
                return Err(Error::Config("no (regime, dose) pair selected for training".into()));
            }
            for s in pipeline::train_models(&run, &grid)? {
                println!(
                    "{}: {} epochs, validation loss {:.6e}{}",
                    pipeline::model_name(s.regime, s.train_alpha),
                    s.epochs,
                    s.final_val_loss,
                    if s.stopped_on_plateau { " (plateau)" } else { "" }
                );
            }
        }
        Command::Denoise => {
            for p in pipeline::denoise(&run, &grid)? {
                println!("{}", p.display());
            }
        }
        Command::Reconstruct => {
            for p in pipeline::reconstruct(&run)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate => {
            let e = pipeline::evaluate(&run)?;
            for x in &e.entries {
                println!(
                    "dose {:<5} {:<22} PSNR {:7.3}  SSIM {:.4}  GMSD {:.5}",
                    x.dose, x.regime, x.projection.psnr.mean, x.projection.ssim.mean, x.projection.gmsd.mean
                );
            }
        }
        Command::CrossTest => {
            let c = pipeline::cross_test(&run)?;
            for x in &c.cells {
                let train = x.train_alpha.map_or("-".into(), |a| a.to_string());
                match x.psnr {
                    Some(q) => println!("{:<22} train {:<5} test {:<5} median PSNR {:.3}", x.regime, train, x.test_alpha, q.median),
                    None => println!("{:<22} train {:<5} test {:<5} absent", x.regime, train, x.test_alpha),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
