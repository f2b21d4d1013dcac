//! Scores a checkpoint on the test split against bicubic upsampling and
//! the HR ceiling.
//!
//! `cargo run --release --example evaluate -- model.ckpt corpus/`

use tatt::losses::Windowing;
use tatt::synth::corpus::{Corpus, Split};
use tatt::train::eval::heldout_tsc;
use tatt::train::{evaluate, Checkpoint};
use tatt::Error;

fn main() -> tatt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, dir] = args.as_slice() else {
        return Err(Error::Contract(
            "usage: evaluate <model.ckpt> <corpus dir>".into(),
        ));
    };
    let ck = Checkpoint::<f32>::load(ckpt.as_ref())?;
    let corpus = Corpus::load(dir.as_ref())?;
    let w = Windowing::default();
    let r = evaluate(&ck.params, &ck.network, &corpus, Split::Test, w)?;
    println!(
        "{} test samples, {} deformed",
        r.samples, r.deformed_samples
    );
    println!(
        "{:<8} {:>8} {:>7} {:>9} {:>9} {:>9}",
        "source", "psnr", "ssim", "char acc", "word acc", "deformed"
    );
    for (name, s) in [("sr", &r.sr), ("bicubic", &r.bicubic), ("hr", &r.hr)] {
        println!(
            "{name:<8} {:>8.2} {:>7.4} {:>9.3} {:>9.3} {:>9.3}",
            s.psnr, s.ssim, s.char_acc, s.word_acc, s.char_acc_deformed
        );
    }
    if r.deformed_samples > 0 {
        let tsc = heldout_tsc(&ck.params, &ck.network, &corpus, Split::Test, 11, w)?;
        println!("held-out consistency loss on deformed samples {tsc:.4}");
    }
    Ok(())
}
