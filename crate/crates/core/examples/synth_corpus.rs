//! Renders a small corpus, reloads it with checksum verification and
//! prints what one sample looks like.
//!
//! `cargo run --release --example synth_corpus -- [dir] [n]`

use std::path::PathBuf;

use tatt::synth::corpus::{generate_corpus, Corpus, Split};
use tatt::synth::pnm;

fn main() -> tatt::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tatt-corpus"));
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);

    let manifest = generate_corpus(n, 7, &dir)?;
    println!(
        "{} samples in {}: {} train / {} val / {} test",
        manifest.header.count,
        dir.display(),
        manifest.split_count(Split::Train),
        manifest.split_count(Split::Val),
        manifest.split_count(Split::Test)
    );

    let corpus = Corpus::load(&dir)?;
    let s = &corpus.samples[0];
    println!(
        "sample 0: {:?}, rotation {:.2}°, shear {:.3}, aspect {:.3}, hr {:?}, lr {:?}, slots {:?}",
        s.label,
        s.deform.rotation,
        s.deform.shear,
        s.deform.aspect,
        s.hr.shape(),
        s.lr.shape(),
        s.slots
    );
    pnm::write_file(&dir.join("preview_hr.ppm"), &pnm::encode_ppm(&s.hr)?)?;
    Ok(())
}
