//! Evaluation harness: image quality against HR and recognition accuracy
//! of the frozen recognizer, for SR output versus the bicubic baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trainer::frozen_copy;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::interpreter::{self, argmax_rows};
use crate::losses::{self, Windowing};
use crate::network::{self, NetworkConfig};
use crate::nn::{ParamStore, Params};
use crate::synth::corpus::{Corpus, GlyphSample, Split, SLOT_STEPS};
use crate::synth::degrade::{bicubic_upsample, box_downsample};
use crate::synth::font;
use crate::synth::warp::DeformationSpec;
use crate::tensor::{Scalar, Tensor};

/// Per-image-source scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceScores {
    pub psnr: f64,
    pub ssim: f64,
    pub char_acc: f64,
    pub word_acc: f64,
    /// Per-character accuracy over samples rendered with a deformation.
    pub char_acc_deformed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub deformed_samples: usize,
    pub sr: SourceScores,
    pub bicubic: SourceScores,
    /// HR fed straight to the recognizer: the accuracy ceiling.
    pub hr: SourceScores,
}

/// Which stored generator acts as the frozen recognizer.
pub fn recognizer_prefix<T: Scalar>(params: &ParamStore<T>) -> &'static str {
    if params.get("recognizer/cls/w").is_some() {
        "recognizer"
    } else {
        "tpg"
    }
}

/// Argmax class per prior step for an HR-geometry image.
pub fn recognize<T: Scalar>(
    params: &ParamStore<T>,
    net: &NetworkConfig,
    prefix: &str,
    img: &Tensor<T>,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let mut p = Params::new(params);
    let x = g.constant(img.clone());
    let (_, prior) = network::text_prior_from_hr(&mut g, &mut p, net, prefix, x)?;
    Ok(argmax_rows(g.value(prior)))
}

/// `(correct characters, characters, word correct)` for one prediction.
pub fn score_prediction(sample: &GlyphSample, pred: &[usize]) -> (usize, usize, bool) {
    let classes = sample.classes();
    let steps = pred.len();
    let slots = sample.slots.iter().map(|&s| s * steps / SLOT_STEPS);
    let correct = classes
        .iter()
        .zip(slots)
        .filter(|&(&c, s)| pred.get(s) == Some(&c))
        .count();
    let word = font::decode_classes(pred) == sample.label;
    (correct, classes.len(), word)
}

#[derive(Default)]
struct Acc {
    psnr: f64,
    ssim: f64,
    chars: usize,
    correct: usize,
    words: usize,
    def_chars: usize,
    def_correct: usize,
}

impl Acc {
    fn add(&mut self, sample: &GlyphSample, pred: &[usize], psnr: f64, ssim: f64) {
        let (c, n, w) = score_prediction(sample, pred);
        self.psnr += psnr;
        self.ssim += ssim;
        self.correct += c;
        self.chars += n;
        self.words += w as usize;
        if !sample.deform.is_identity() {
            self.def_correct += c;
            self.def_chars += n;
        }
    }

    fn finish(&self, n: usize) -> SourceScores {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        SourceScores {
            psnr: self.psnr / n as f64,
            ssim: self.ssim / n as f64,
            char_acc: ratio(self.correct, self.chars),
            word_acc: ratio(self.words, n),
            char_acc_deformed: ratio(self.def_correct, self.def_chars),
        }
    }
}

/// Runs the network on every LR image of `split`.
pub fn evaluate<T: Scalar>(
    params: &ParamStore<T>,
    net: &NetworkConfig,
    corpus: &Corpus,
    split: Split,
    windowing: Windowing,
) -> Result<EvalReport> {
    let idx = corpus.indices(split);
    if idx.is_empty() {
        return Err(Error::Contract(format!("split {split:?} is empty")));
    }
    let frozen = frozen_copy(params);
    let prefix = recognizer_prefix(&frozen);
    let (mut sr_acc, mut bic_acc, mut hr_acc) = (Acc::default(), Acc::default(), Acc::default());
    let mut deformed = 0;
    for &i in &idx {
        let s = &corpus.samples[i];
        deformed += !s.deform.is_identity() as usize;
        let hr = s.hr.cast::<T>();
        let sr = network::infer(&frozen, net, &s.lr.cast())?.sr;
        let bic = bicubic_upsample(&s.lr.cast::<T>(), net.scale)?;
        for (acc, img) in [(&mut sr_acc, &sr), (&mut bic_acc, &bic), (&mut hr_acc, &hr)] {
            let pred = recognize(&frozen, net, prefix, img)?;
            let psnr = losses::psnr(img, &hr)?;
            let ssim = losses::ssim_value(img, &hr, windowing)?;
            acc.add(s, &pred, psnr, ssim);
        }
    }
    let n = idx.len();
    Ok(EvalReport {
        split,
        samples: n,
        deformed_samples: deformed,
        sr: sr_acc.finish(n),
        bicubic: bic_acc.finish(n),
        hr: hr_acc.finish(n),
    })
}

/// Deformation assigned to held-out sample `index` for consistency scoring.
pub fn heldout_deformation(seed: u64, index: usize) -> DeformationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    DeformationSpec::sample(&mut rng)
}

/// Mean `L_TSC` over the deformed samples of `split`, each under its own
/// seeded deformation.
pub fn heldout_tsc<T: Scalar>(
    params: &ParamStore<T>,
    net: &NetworkConfig,
    corpus: &Corpus,
    split: Split,
    seed: u64,
    windowing: Windowing,
) -> Result<f64> {
    let idx: Vec<usize> = corpus
        .indices(split)
        .into_iter()
        .filter(|&i| !corpus.samples[i].deform.is_identity())
        .collect();
    if idx.is_empty() {
        return Err(Error::Contract(format!(
            "split {split:?} has no deformed samples"
        )));
    }
    let frozen = frozen_copy(params);
    let mut total = 0.0;
    for &i in &idx {
        let s = &corpus.samples[i];
        let spec = heldout_deformation(seed, s.index);
        let mut g = Graph::<T>::new();
        let mut p = Params::new(&frozen);
        let hr = g.constant(s.hr.cast());
        let lr = g.constant(s.lr.cast());
        let forward =
            |g: &mut Graph<T>, v| network::reconstruct_sr(g, &mut p, net, v).map(|o| o.sr);
        let l = losses::l_tsc(&mut g, hr, lr, None, forward, &spec, windowing)?;
        total += g.item(l).as_f64();
    }
    Ok(total / idx.len() as f64)
}

/// Attention share inside the foreground mask for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAttention {
    pub index: usize,
    /// Mean over the label's characters of the in-mask attention share.
    pub share: f64,
    /// In-mask share a uniform attention column would have.
    pub uniform: f64,
}

/// HR mask averaged down to the LR query grid, flattened row-major.
pub fn lr_mask(sample: &GlyphSample, scale: usize) -> Result<Vec<f64>> {
    let (h, w) = (sample.mask.shape()[0], sample.mask.shape()[1]);
    let m = box_downsample(&sample.mask.clone().reshape(&[h, w, 1])?, scale)?;
    Ok(m.into_data())
}

pub fn mask_attention<T: Scalar>(
    params: &ParamStore<T>,
    net: &NetworkConfig,
    sample: &GlyphSample,
) -> Result<Option<MaskAttention>> {
    let frozen = frozen_copy(params);
    let inf = network::infer(&frozen, net, &sample.lr.cast())?;
    let Some(att) = inf.attention else {
        return Ok(None);
    };
    let mask = lr_mask(sample, net.scale)?;
    let steps = att.keys();
    let mut shares = Vec::new();
    let mut uniform = 0.0;
    for &slot in &sample.slots {
        let key = slot * steps / SLOT_STEPS;
        let col = att.key_column(key)?;
        let (s, u) = interpreter::mask_attention_share(&col, &mask);
        shares.push(s);
        uniform = u;
    }
    if shares.is_empty() {
        return Ok(None);
    }
    Ok(Some(MaskAttention {
        index: sample.index,
        share: shares.iter().sum::<f64>() / shares.len() as f64,
        uniform,
    }))
}
