//! Joint training from a briefly pretrained generator: 200 steps on the
//! default corpus should cut the total loss at least in half.
//!
//! `cargo run --release --example train_loop -- [steps]`

use std::time::Instant;

use tatt::synth::corpus::{generate_corpus, Corpus};
use tatt::train::{init_joint_params, pretrain_tpg, run, PretrainConfig, TrainConfig, TrainState};
use tatt::NetworkConfig;

fn main() -> tatt::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let dir = tempfile_dir();
    generate_corpus(512, 7, &dir)?;
    let corpus = Corpus::load(&dir)?;

    let net = NetworkConfig::desk();
    let pre_cfg = PretrainConfig {
        steps: 300,
        ..PretrainConfig::default()
    };
    let (pre, _) = pretrain_tpg::<f32>(&net, &pre_cfg, |_, _| {})?;
    let train = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let params = init_joint_params(&net, train.seed, Some(&pre))?;
    let mut state = TrainState::new(train, net, params)?;

    let start = Instant::now();
    let mut totals = Vec::new();
    run(&mut state, &corpus, steps, |_, r, val| {
        totals.push(r.total);
        if r.step % 20 == 0 {
            println!(
                "step {:>4}  total {:.4}  sr {:.5}  tp {:.4}  tsc {:.4}{}",
                r.step,
                r.total,
                r.l_sr,
                r.l_tp,
                r.l_tsc,
                val.map(|v| format!("  val psnr {:.2}", v.val_psnr))
                    .unwrap_or_default()
            );
        }
        Ok(())
    })?;
    let k = (totals.len() / 10).max(1);
    let first = totals[..k].iter().sum::<f64>() / k as f64;
    let last = totals[totals.len() - k..].iter().sum::<f64>() / k as f64;
    let fall = 1.0 - last / first;
    println!(
        "{:.0}s: total {first:.4} -> {last:.4}, fall {:.1}% ({})",
        start.elapsed().as_secs_f64(),
        100.0 * fall,
        if fall >= 0.5 { "pass" } else { "FAIL" }
    );
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join("tatt-train-loop-corpus")
}
