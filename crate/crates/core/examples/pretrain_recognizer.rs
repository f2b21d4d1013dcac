//! Pretrains the text-prior generator as a per-position classifier and
//! reports held-out accuracy.
//!
//! `cargo run --release --example pretrain_recognizer -- [steps] [out.ckpt]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tatt::train::{pretrain_tpg, AdamState, Checkpoint, PretrainConfig, RngState, TrainConfig};
use tatt::NetworkConfig;

fn main() -> tatt::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(PretrainConfig::default().steps);
    let out = args.next();

    let net = NetworkConfig::desk();
    let cfg = PretrainConfig {
        steps,
        ..PretrainConfig::default()
    };
    let start = Instant::now();
    let (params, report) = pretrain_tpg::<f32>(&net, &cfg, |step, loss| {
        if step % 250 == 0 {
            println!("step {step:>5}  cross-entropy {loss:.4}");
        }
    })?;
    println!(
        "{:.0}s: clean position accuracy {:.4}, clean characters {:.4}, deformed positions {:.4}",
        start.elapsed().as_secs_f64(),
        report.accuracy,
        report.char_accuracy,
        report.deformed_accuracy
    );
    if let Some(path) = out {
        Checkpoint {
            train: TrainConfig::default(),
            network: net,
            step: steps,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(cfg.seed)),
            params,
            adam: AdamState::new(),
        }
        .save(path.as_ref())?;
    }
    Ok(())
}
