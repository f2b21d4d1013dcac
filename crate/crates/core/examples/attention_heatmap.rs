//! Writes the attention of each label character over the LR grid as a
//! graymap and reports how much of it lands on the character's strokes.
//!
//! `cargo run --release --example attention_heatmap -- model.ckpt [sample]`

use tatt::interpreter::attention_heatmap_extract;
use tatt::network::infer;
use tatt::synth::corpus::{generate_sample, sample_seed, Split, SLOT_STEPS};
use tatt::synth::pnm;
use tatt::train::eval::mask_attention;
use tatt::train::Checkpoint;
use tatt::Error;

fn main() -> tatt::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args
        .next()
        .ok_or_else(|| Error::Contract("usage: attention_heatmap <model.ckpt> [sample]".into()))?;
    let index = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let ck = Checkpoint::<f32>::load(ckpt.as_ref())?;
    let net = &ck.network;
    let sample = generate_sample(sample_seed(7, index), index, Split::Test)?;

    let inf = infer(&ck.params, net, &sample.lr.cast())?;
    let att = inf
        .attention
        .ok_or_else(|| Error::Contract("model has no text-prior branch".into()))?;
    for (pos, &slot) in sample.slots.iter().enumerate() {
        let key = slot * net.prior_len / SLOT_STEPS;
        let map = attention_heatmap_extract(&att, key, net.lr_height, net.lr_width)?;
        let path = std::env::temp_dir().join(format!("heatmap_{index}_{pos}.pgm"));
        pnm::write_file(&path, &pnm::encode_pgm(&map)?)?;
        println!(
            "{:?} -> {}",
            sample.label.chars().nth(pos).unwrap_or('?'),
            path.display()
        );
    }
    if let Some(m) = mask_attention(&ck.params, net, &sample)? {
        println!(
            "attention on strokes {:.3} vs uniform {:.3}",
            m.share, m.uniform
        );
    }
    Ok(())
}
