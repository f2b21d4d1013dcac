//! Text-prior interpreter: an encoder over the prior sequence and a decoder
//! that cross-attends image positions to prior elements, producing the TP
//! map that modulates the image feature.

use crate::attention::{self, AttentionConfig, AttentionWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::NetworkConfig;
use crate::nn::{self, Declare, Params};
use crate::tensor::{Scalar, Tensor};

/// Number of classes: `0-9`, `a-z` and the blank.
pub const ALPHABET_SIZE: usize = 37;

/// Row-sum tolerance for a prior of element type `T`.
pub fn prior_tolerance<T: Scalar>() -> f64 {
    (64.0 * T::epsilon().as_f64()).max(1e-6)
}

/// Checks that each row of an `l×|A|` tensor is a probability vector.
pub fn check_prior_rows<T: Scalar>(probs: &Tensor<T>) -> Result<()> {
    if probs.ndim() != 2 {
        return Err(Error::dim(
            "text_prior",
            format!("{:?} is not l×|A|", probs.shape()),
        ));
    }
    let tol = prior_tolerance::<T>();
    for (i, row) in probs.data().chunks(probs.last_dim()).enumerate() {
        if row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::Contract(format!(
                "prior row {i} has negative entries"
            )));
        }
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::Contract(format!("prior row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// `l × |A|` categorical probabilities, one row per sequence step.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPrior<T> {
    probs: Tensor<T>,
}

impl<T: Scalar> TextPrior<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        check_prior_rows(&probs)?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Most likely class per step.
    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    t.data()
        .chunks(t.last_dim())
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

fn attention_config(cfg: &NetworkConfig) -> AttentionConfig {
    AttentionConfig {
        heads: cfg.heads,
        channels: cfg.channels,
        key_dim: cfg.key_dim,
    }
}

pub fn declare(d: &mut Declare, cfg: &NetworkConfig) {
    let c = cfg.channels;
    let att = attention_config(cfg);
    nn::declare_linear(d, "interp/in_proj", cfg.alphabet, c, true);
    for k in 0..cfg.encoder_layers {
        let p = format!("interp/enc{k}");
        attention::declare_multi_head(d, &format!("{p}/msa"), &att);
        nn::declare_layer_norm(d, &format!("{p}/ln1"), c);
        attention::declare_feed_forward(d, &format!("{p}/ffn"), c, cfg.ffn_hidden);
        nn::declare_layer_norm(d, &format!("{p}/ln2"), c);
    }
    attention::declare_recurrent_encoding(
        d,
        "interp/rpe",
        cfg.lr_height,
        cfg.lr_width,
        c,
        cfg.bidirectional_rpe,
    );
    for k in 0..cfg.decoder_layers {
        let p = format!("interp/dec{k}");
        attention::declare_multi_head(d, &format!("{p}/mca"), &att);
        nn::declare_layer_norm(d, &format!("{p}/ln1"), c);
        attention::declare_feed_forward(d, &format!("{p}/ffn"), c, cfg.ffn_hidden);
        nn::declare_layer_norm(d, &format!("{p}/ln2"), c);
    }
}

/// Projects the prior to `c` channels, adds the sinusoidal encoding, then
/// runs `LN(x + MSA(x))` and `LN(x + FFN(x))` per encoder layer.
pub fn encode_prior<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    cfg: &NetworkConfig,
    prior: Var,
) -> Result<Var> {
    check_prior_rows(g.value(prior))?;
    let s = g.shape(prior).to_vec();
    if s[1] != cfg.alphabet {
        return Err(Error::dim(
            "encode_prior",
            format!("prior {s:?} vs alphabet {}", cfg.alphabet),
        ));
    }
    let att = attention_config(cfg);
    let x = nn::apply_linear(g, p, "interp/in_proj", prior)?;
    let fpe = g.constant(attention::fixed_positional_encoding(s[0], cfg.channels)?);
    let mut x = g.add(x, fpe)?;
    for k in 0..cfg.encoder_layers {
        let pre = format!("interp/enc{k}");
        let (a, _) = attention::multi_head_self_attention(g, p, &format!("{pre}/msa"), x, &att)?;
        let r = g.add(x, a)?;
        x = nn::apply_layer_norm(g, p, &format!("{pre}/ln1"), r)?;
        let f = attention::feed_forward_network(g, p, &format!("{pre}/ffn"), x)?;
        let r = g.add(x, f)?;
        x = nn::apply_layer_norm(g, p, &format!("{pre}/ln2"), r)?;
    }
    Ok(x)
}

/// Adds the recurrent encoding to `f_i`, cross-attends every image position
/// to the encoded prior, and refines with `LN(m + FFN(m))`. Returns the TP
/// map (`h×w×c`) and the per-head attention of the last decoder layer.
pub fn decode_to_tp_map<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    cfg: &NetworkConfig,
    f_e: Var,
    f_i: Var,
) -> Result<(Var, Vec<Var>)> {
    let s = g.shape(f_i).to_vec();
    if s.len() != 3 || s[2] != cfg.channels || g.shape(f_e).get(1) != Some(&cfg.channels) {
        return Err(Error::dim(
            "decode_to_tp_map",
            format!(
                "image feature {s:?}, prior feature {:?}, channels {}",
                g.shape(f_e),
                cfg.channels
            ),
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let att = attention_config(cfg);
    let rpe = attention::recurrent_positional_encoding(g, p, "interp/rpe", h, w, c)?;
    let f_i_pos = g.add(f_i, rpe)?;
    let mut q = g.reshape(f_i_pos, &[h * w, c])?;
    let mut weights = Vec::new();
    for k in 0..cfg.decoder_layers {
        let pre = format!("interp/dec{k}");
        let (m, wts) =
            attention::multi_head_cross_attention(g, p, &format!("{pre}/mca"), f_e, q, &att)?;
        let m = nn::apply_layer_norm(g, p, &format!("{pre}/ln1"), m)?;
        let f = attention::feed_forward_network(g, p, &format!("{pre}/ffn"), m)?;
        let r = g.add(m, f)?;
        q = nn::apply_layer_norm(g, p, &format!("{pre}/ln2"), r)?;
        weights = wts;
    }
    Ok((g.reshape(q, &[h, w, c])?, weights))
}

/// Per-character heatmap: mean over heads of the attention every image
/// position pays to prior element `char_index`, min-max normalized to
/// `[0, 1]`. A constant map normalizes to all zeros.
pub fn attention_heatmap_extract<T: Scalar>(
    weights: &AttentionWeights<T>,
    char_index: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<f64>> {
    if weights.queries() != h * w {
        return Err(Error::dim(
            "attention_heatmap_extract",
            format!("{} queries for a {h}x{w} map", weights.queries()),
        ));
    }
    let col = weights.key_column(char_index)?;
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = col
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Tensor::new([h, w], data)
}

/// Share of a key column's attention mass that lands inside a (soft)
/// foreground mask, and the share a uniform column would give.
pub fn mask_attention_share(column: &[f64], mask: &[f64]) -> (f64, f64) {
    let total: f64 = column.iter().sum();
    let inside: f64 = column.iter().zip(mask).map(|(a, m)| a * m).sum();
    let uniform = mask.iter().sum::<f64>() / mask.len() as f64;
    let share = if total > 0.0 { inside / total } else { uniform };
    (share, uniform)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_validation() {
        let ok = Tensor::<f64>::from_f64([2, 2], &[0.5, 0.5, 1.0, 0.0]).unwrap();
        assert!(TextPrior::new(ok).is_ok());
        let bad = Tensor::<f64>::from_f64([2, 2], &[0.5, 0.4, 1.0, 0.0]).unwrap();
        assert!(matches!(TextPrior::new(bad), Err(Error::Contract(_))));
        let neg = Tensor::<f64>::from_f64([1, 2], &[1.5, -0.5]).unwrap();
        assert!(TextPrior::new(neg).is_err());
    }

    #[test]
    fn uniform_attention_heatmap_is_zero() {
        let aw = AttentionWeights {
            weights: Tensor::<f64>::full([2, 6, 3], 1.0 / 3.0),
        };
        let hm = attention_heatmap_extract(&aw, 1, 2, 3).unwrap();
        assert!(hm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_attention_heatmap_marks_one_cell() {
        let mut w = Tensor::<f64>::zeros([1, 4, 2]);
        for q in 0..4 {
            w.set(&[0, q, 1], 1.0);
        }
        w.set(&[0, 2, 0], 1.0);
        w.set(&[0, 2, 1], 0.0);
        let aw = AttentionWeights { weights: w };
        let hm = attention_heatmap_extract(&aw, 0, 2, 2).unwrap();
        assert_eq!(hm.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            attention_heatmap_extract(&aw, 2, 2, 2),
            Err(Error::Bounds { .. })
        ));
    }

    #[test]
    fn mask_share_uniform_equals_expectation() {
        let col = vec![0.25; 8];
        let mask = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let (share, uniform) = mask_attention_share(&col, &mask);
        assert!((share - uniform).abs() < 1e-15);
        assert_eq!(uniform, 0.25);
    }
}
