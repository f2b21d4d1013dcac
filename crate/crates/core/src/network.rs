//! The full super-resolution network: prior generator, image feature,
//! interpreter, text-prior guided blocks and the pixel-shuffle tail.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, SparseMap, Var};
use crate::interpreter::{self, ALPHABET_SIZE};
use crate::losses;
use crate::nn::{self, Declare, ParamStore, Params};
use crate::tensor::{Scalar, Tensor};

/// Variance floor of the recognizer's input standardization.
const LUMA_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub lr_height: usize,
    pub lr_width: usize,
    pub scale: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub ffn_hidden: usize,
    pub prior_len: usize,
    pub alphabet: usize,
    pub feature_kernel: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub bidirectional_rpe: bool,
    /// Prior generator widths: first conv, second and third conv, sequence conv.
    pub tpg_channels: [usize; 3],
    /// When false the TP map is never computed (the "w/o TP" ablation).
    pub tp_branch: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetworkConfig {
    /// 16×64 input, 2× output, 64 channels, 5 guided blocks, 4 heads.
    pub fn full() -> Self {
        Self {
            lr_height: 16,
            lr_width: 64,
            scale: 2,
            channels: 64,
            blocks: 5,
            heads: 4,
            key_dim: 64,
            ffn_hidden: 64,
            prior_len: 16,
            alphabet: ALPHABET_SIZE,
            feature_kernel: 9,
            encoder_layers: 1,
            decoder_layers: 1,
            bidirectional_rpe: false,
            tpg_channels: [32, 64, 64],
            tp_branch: true,
        }
    }

    /// Miniature geometry for finite-difference checks (h=4, w=8, c=8, l=4, n=2).
    pub fn mini() -> Self {
        Self {
            lr_height: 4,
            lr_width: 8,
            channels: 8,
            blocks: 2,
            heads: 2,
            key_dim: 4,
            ffn_hidden: 8,
            prior_len: 4,
            feature_kernel: 3,
            tpg_channels: [4, 6, 6],
            ..Self::full()
        }
    }

    /// Full 16×64 geometry at a width that trains on one core.
    pub fn desk() -> Self {
        Self {
            channels: 8,
            blocks: 2,
            heads: 2,
            key_dim: 8,
            ffn_hidden: 16,
            feature_kernel: 5,
            tpg_channels: [8, 16, 32],
            ..Self::full()
        }
    }

    pub fn hr_height(&self) -> usize {
        self.lr_height * self.scale
    }

    pub fn hr_width(&self) -> usize {
        self.lr_width * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |d: String| Err(Error::dim("network_config", d));
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "{} channels over {} heads",
                self.channels, self.heads
            ));
        }
        if self.lr_height % 2 != 0 || self.lr_width % 2 != 0 {
            return fail(format!(
                "LR size {}x{} must be even",
                self.lr_height, self.lr_width
            ));
        }
        if self.prior_len == 0 || (self.lr_width / 2) % self.prior_len != 0 {
            return fail(format!(
                "prior length {} must divide half the width {}",
                self.prior_len,
                self.lr_width / 2
            ));
        }
        if self.feature_kernel % 2 == 0
            || self.scale == 0
            || self.channels % 2 != 0
            || self.channels < 4
        {
            return fail(
                "feature kernel must be odd, scale positive, channels even and at least 4".into(),
            );
        }
        if self.alphabet != ALPHABET_SIZE {
            return fail(format!("alphabet must have {ALPHABET_SIZE} classes"));
        }
        Ok(())
    }

    /// Every parameter the network owns, in declaration order.
    pub fn declare(&self) -> Declare {
        let mut d = Declare::new();
        declare_text_prior_generator(&mut d, self, "tpg");
        nn::declare_conv(&mut d, "feature", self.feature_kernel, 3, self.channels);
        interpreter::declare(&mut d, self);
        for b in 0..self.blocks {
            declare_srb(&mut d, &format!("tpgb{b}"), self.channels);
        }
        nn::declare_conv(
            &mut d,
            "tail",
            3,
            self.channels,
            3 * self.scale * self.scale,
        );
        d
    }

    /// Random parameters from `seed`, then arranged so that the untrained
    /// network outputs the nearest-neighbour upsampling of its input: the
    /// first three feature channels copy the RGB input, every block's last
    /// convolution and the TP map's final gain start at zero, and the tail
    /// maps those three channels onto each sub-pixel.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = nn::init_params(&self.declare(), seed);
        self.start_from_upsampling(&mut store)?;
        Ok(store)
    }

    fn start_from_upsampling<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let (k, r2) = (self.feature_kernel, self.scale * self.scale);
        let fw = store.tensor_mut("feature/w")?;
        for dy in 0..k {
            for dx in 0..k {
                for cin in 0..3 {
                    for cout in 0..3 {
                        let v = if dy == k / 2 && dx == k / 2 && cin == cout {
                            T::one()
                        } else {
                            T::zero()
                        };
                        fw.set(&[dy, dx, cin, cout], v);
                    }
                }
            }
        }
        for b in 0..self.blocks {
            zero(store.tensor_mut(&format!("tpgb{b}/conv2/w"))?);
        }
        if self.tp_branch && self.decoder_layers > 0 {
            zero(store.tensor_mut(&format!("interp/dec{}/ln2/gain", self.decoder_layers - 1))?);
        }
        let tw = store.tensor_mut("tail/w")?;
        zero(tw);
        // the trunk output plus the feature skip holds each copied channel twice
        for colour in 0..3 {
            for sub in 0..r2 {
                tw.set(&[1, 1, colour, colour * r2 + sub], T::lit(0.5));
            }
        }
        Ok(())
    }
}

fn zero<T: Scalar>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| *v = T::zero());
}

/// Parameters of the prior generator under `prefix`.
pub fn declare_text_prior_generator(d: &mut Declare, cfg: &NetworkConfig, prefix: &str) {
    let [c1, c2, c3] = cfg.tpg_channels;
    nn::declare_conv(d, &format!("{prefix}/conv1"), 3, 1, c1);
    nn::declare_conv(d, &format!("{prefix}/conv2"), 3, c1, c2);
    nn::declare_conv(d, &format!("{prefix}/conv3"), 3, c2, c3);
    nn::declare_conv_rect(d, &format!("{prefix}/seq"), 1, 3, c3, c3);
    nn::declare_linear(d, &format!("{prefix}/cls"), c3, cfg.alphabet, true);
}

fn sequence_pool_map<T: Scalar>(h: usize, w: usize, c: usize, steps: usize) -> SparseMap<T> {
    let bin = w / steps;
    let weight = T::lit(1.0 / (h * bin) as f64);
    let rows = (0..steps).flat_map(move |s| {
        (0..c).map(move |ch| {
            let mut row = Vec::with_capacity(h * bin);
            for y in 0..h {
                for x in s * bin..(s + 1) * bin {
                    row.push(((y * w + x) * c + ch, weight));
                }
            }
            row
        })
    });
    SparseMap::from_rows(h * w * c, rows)
}

/// Luminance of an `h×w×3` image shifted to zero mean and scaled to unit
/// variance over the whole image, as `h×w×1`.
pub fn standardized_luminance<T: Scalar>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    let s = g.shape(img).to_vec();
    let (h, w) = (s[0], s[1]);
    let y = losses::luminance(g, img)?;
    let flat = g.reshape(y, &[1, h * w])?;
    let gain = g.constant(Tensor::full([h * w], T::one()));
    let bias = g.constant(Tensor::zeros([h * w]));
    let z = g.layer_norm(flat, gain, bias, T::lit(LUMA_EPS))?;
    g.reshape(z, &[h, w, 1])
}

/// Recognizer head shared by the network and the frozen evaluator:
/// conv → conv → pool 2×2 → conv → pool to `l` columns → sequence conv →
/// classifier. Returns `(logits, prior)`, both `l×|A|`.
pub fn text_prior_generator<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    cfg: &NetworkConfig,
    prefix: &str,
    img: Var,
) -> Result<(Var, Var)> {
    let s = g.shape(img).to_vec();
    if s != [cfg.lr_height, cfg.lr_width, 3] {
        return Err(Error::dim(
            "generate_text_prior",
            format!(
                "image {s:?}, expected [{}, {}, 3]",
                cfg.lr_height, cfg.lr_width
            ),
        ));
    }
    let x = standardized_luminance(g, img)?;
    let x = nn::apply_conv(g, p, &format!("{prefix}/conv1"), x)?;
    let x = g.relu(x);
    let x = nn::apply_conv(g, p, &format!("{prefix}/conv2"), x)?;
    let x = g.relu(x);
    let x = nn::avg_pool(g, x, 2, 2)?;
    let x = nn::apply_conv(g, p, &format!("{prefix}/conv3"), x)?;
    let x = g.relu(x);
    let (h2, w2, c3) = (cfg.lr_height / 2, cfg.lr_width / 2, cfg.tpg_channels[2]);
    let map = sequence_pool_map::<T>(h2, w2, c3, cfg.prior_len);
    let seq = g.sparse(x, Arc::new(map), vec![1, cfg.prior_len, c3])?;
    let seq = nn::apply_conv(g, p, &format!("{prefix}/seq"), seq)?;
    let seq = g.relu(seq);
    let seq = g.reshape(seq, &[cfg.prior_len, c3])?;
    let logits = nn::apply_linear(g, p, &format!("{prefix}/cls"), seq)?;
    let prior = g.softmax_lastdim(logits)?;
    Ok((logits, prior))
}

/// Prior of an HR image: 2×2 average-pooled to LR geometry first.
pub fn text_prior_from_hr<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    cfg: &NetworkConfig,
    prefix: &str,
    hr: Var,
) -> Result<(Var, Var)> {
    let pooled = nn::avg_pool(g, hr, cfg.scale, cfg.scale)?;
    text_prior_generator(g, p, cfg, prefix, pooled)
}

pub fn extract_image_feature<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    cfg: &NetworkConfig,
    lr: Var,
) -> Result<Var> {
    let s = g.shape(lr);
    if s != [cfg.lr_height, cfg.lr_width, 3] {
        return Err(Error::dim(
            "extract_image_feature",
            format!(
                "image {s:?}, expected [{}, {}, 3]",
                cfg.lr_height, cfg.lr_width
            ),
        ));
    }
    nn::apply_conv(g, p, "feature", lr)
}

pub fn declare_srb(d: &mut Declare, prefix: &str, c: usize) {
    nn::declare_conv(d, &format!("{prefix}/conv1"), 3, c, c);
    nn::declare_row_scan(d, &format!("{prefix}/rows"), c);
    nn::declare_row_scan(d, &format!("{prefix}/cols"), c);
    nn::declare_conv(d, &format!("{prefix}/conv2"), 3, c, c);
}

/// Sequential-recurrent block: conv → row scan → column scan → conv, with
/// a residual around the whole block.
pub fn sequential_recurrent_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let y = nn::apply_conv(g, p, &format!("{prefix}/conv1"), x)?;
    let y = nn::bidirectional_row_scan(g, p, &format!("{prefix}/rows"), y)?;
    let y = nn::bidirectional_column_scan(g, p, &format!("{prefix}/cols"), y)?;
    let y = nn::apply_conv(g, p, &format!("{prefix}/conv2"), y)?;
    g.add(x, y)
}

/// `SRB(f + f_TM)`; without a TP map the block sees `f` alone.
pub fn tpgb_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    tp_map: Option<Var>,
    f: Var,
) -> Result<Var> {
    let x = match tp_map {
        Some(m) => g.add(f, m)?,
        None => f,
    };
    sequential_recurrent_block(g, p, prefix, x)
}

/// Graph handles produced by one network forward pass.
#[derive(Clone, Debug)]
pub struct SrForward {
    /// Unclamped SR image, `rh×rw×3`.
    pub sr: Var,
    pub logits: Option<Var>,
    pub prior: Option<Var>,
    pub tp_map: Option<Var>,
    pub attention: Vec<Var>,
    pub feature: Var,
}

impl SrForward {
    pub fn attention_weights<T: Scalar>(&self, g: &Graph<T>) -> Option<AttentionWeights<T>> {
        if self.attention.is_empty() {
            None
        } else {
            AttentionWeights::from_heads(g, &self.attention).ok()
        }
    }
}

/// LR image → SR image through the whole pipeline.
pub fn reconstruct_sr<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    cfg: &NetworkConfig,
    lr: Var,
) -> Result<SrForward> {
    let feature = extract_image_feature(g, p, cfg, lr)?;
    let (logits, prior, tp_map, attention) = if cfg.tp_branch {
        let (logits, prior) = text_prior_generator(g, p, cfg, "tpg", lr)?;
        let f_e = interpreter::encode_prior(g, p, cfg, prior)?;
        let (tp_map, attention) = interpreter::decode_to_tp_map(g, p, cfg, f_e, feature)?;
        (Some(logits), Some(prior), Some(tp_map), attention)
    } else {
        (None, None, None, Vec::new())
    };
    let mut f = feature;
    for b in 0..cfg.blocks {
        f = tpgb_forward(g, p, &format!("tpgb{b}"), tp_map, f)?;
    }
    let f = g.add(f, feature)?;
    let out = nn::apply_conv(g, p, "tail", f)?;
    let sr = nn::pixel_shuffle(g, out, cfg.scale)?;
    Ok(SrForward {
        sr,
        logits,
        prior,
        tp_map,
        attention,
        feature,
    })
}

/// Convenience inference: clamped SR image plus diagnostics, no gradients.
pub struct Inference<T> {
    pub sr: Tensor<T>,
    pub prior: Option<Tensor<T>>,
    pub attention: Option<AttentionWeights<T>>,
}

pub fn infer<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetworkConfig,
    lr: &Tensor<T>,
) -> Result<Inference<T>> {
    let mut g = Graph::new();
    let mut p = Params::new(store);
    let x = g.constant(lr.clone());
    let out = reconstruct_sr(&mut g, &mut p, cfg, x)?;
    Ok(Inference {
        sr: g.value(out.sr).map(|v| v.max(T::zero()).min(T::one())),
        prior: out.prior.map(|v| g.value(v).clone()),
        attention: out.attention_weights(&g),
    })
}
