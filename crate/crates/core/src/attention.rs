//! Attention layers and the two positional encodings used by the
//! text-prior interpreter.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Declare, Params};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub channels: usize,
    pub key_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            channels: 64,
            key_dim: 64,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 || self.key_dim == 0 {
            return Err(Error::dim(
                "attention_config",
                format!(
                    "{} channels cannot be split into {} heads (key dim {})",
                    self.channels, self.heads, self.key_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn group(&self) -> usize {
        self.channels / self.heads
    }
}

/// Softmax outputs of a multi-head attention: `heads × queries × keys`,
/// each query row a distribution over the keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn from_heads(g: &Graph<T>, heads: &[Var]) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::dim("attention_weights", "no heads"))?;
        let s = g.shape(*first).to_vec();
        let mut data = Vec::with_capacity(heads.len() * s.iter().product::<usize>());
        for &h in heads {
            if g.shape(h) != s {
                return Err(Error::dim(
                    "attention_weights",
                    format!("{:?} vs {s:?}", g.shape(h)),
                ));
            }
            data.extend_from_slice(g.value(h).data());
        }
        Ok(Self {
            weights: Tensor::new([heads.len(), s[0], s[1]], data)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.weights
            .data()
            .chunks(self.keys())
            .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over heads of the weight every query gives to key `key`.
    pub fn key_column(&self, key: usize) -> Result<Vec<f64>> {
        if key >= self.keys() {
            return Err(Error::Bounds {
                index: key,
                limit: self.keys(),
            });
        }
        let (n, q, l) = (self.heads(), self.queries(), self.keys());
        let d = self.weights.data();
        Ok((0..q)
            .map(|qi| {
                (0..n)
                    .map(|hd| d[(hd * q + qi) * l + key].as_f64())
                    .sum::<f64>()
                    / n as f64
            })
            .collect())
    }
}

/// Sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^(2i/c))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/c))`.
pub fn fixed_positional_encoding<T: Scalar>(length: usize, channels: usize) -> Result<Tensor<T>> {
    if channels % 2 != 0 {
        return Err(Error::dim(
            "fixed_positional_encoding",
            format!("channel count {channels} must be even"),
        ));
    }
    let data = (0..length)
        .flat_map(|pos| sinusoid(pos as f64, channels))
        .map(T::lit)
        .collect();
    Tensor::new([length, channels], data)
}

/// One row of the sinusoidal table at a possibly fractional position.
pub fn sinusoid(pos: f64, channels: usize) -> Vec<f64> {
    (0..channels / 2)
        .flat_map(|i| {
            let angle = pos / 10000f64.powf((2 * i) as f64 / channels as f64);
            [angle.sin(), angle.cos()]
        })
        .collect()
}

pub fn declare_recurrent_encoding(
    d: &mut Declare,
    prefix: &str,
    h: usize,
    w: usize,
    c: usize,
    bidirectional: bool,
) {
    d.weight(format!("{prefix}/param"), &[h, w, c], c);
    nn::declare_gated_cell(d, &format!("{prefix}/cell"), c);
    if bidirectional {
        nn::declare_gated_cell(d, &format!("{prefix}/cell_rev"), c);
    }
}

/// Learnable `h×w×c` table passed through a left→right gated scan along each
/// row. With `cell_rev` present the right→left pass is added too.
pub fn recurrent_positional_encoding<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Var> {
    let param = p.var(g, &format!("{prefix}/param"))?;
    if g.shape(param) != [h, w, c] {
        return Err(Error::dim(
            "recurrent_positional_encoding",
            format!("table {:?} for feature {h}x{w}x{c}", g.shape(param)),
        ));
    }
    let fwd = nn::gated_scan(g, p, &format!("{prefix}/cell"), param, false)?;
    let rev = format!("{prefix}/cell_rev");
    if p.has(&format!("{rev}/wz")) {
        let bwd = nn::gated_scan(g, p, &rev, param, true)?;
        return g.add(fwd, bwd);
    }
    Ok(fwd)
}

/// One head of scaled dot-product cross attention. Queries come from the
/// image feature `f_i` (`hw×c/n`), keys and values from the prior feature
/// `f_e` (`l×c/n`). Softmax runs over the `l` keys of each query.
/// Returns `(output hw×d_k, weights hw×l)`.
pub fn cross_attention_head<T: Scalar>(
    g: &mut Graph<T>,
    f_e: Var,
    f_i: Var,
    w_query: Var,
    w_key: Var,
    w_value: Var,
) -> Result<(Var, Var)> {
    let dk = *g
        .shape(w_query)
        .last()
        .ok_or_else(|| Error::dim("cross_attention_head", "scalar projection"))?;
    let q = g.matmul(f_i, w_query)?;
    let k = g.matmul(f_e, w_key)?;
    let v = g.matmul(f_e, w_value)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::one() / T::lit(dk as f64).sqrt());
    let weights = g.softmax_lastdim(logits)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn declare_multi_head(d: &mut Declare, prefix: &str, cfg: &AttentionConfig) {
    let group = cfg.group();
    for i in 0..cfg.heads {
        for name in ["wq", "wk", "wv"] {
            d.weight(
                format!("{prefix}/head{i}/{name}"),
                &[group, cfg.key_dim],
                group,
            );
        }
    }
    d.weight(
        format!("{prefix}/wo"),
        &[cfg.heads * cfg.key_dim, cfg.channels],
        cfg.heads * cfg.key_dim,
    );
}

/// Channel-split multi-head cross attention: per-group heads, concatenated
/// and projected by `wo`. Returns the output (`hw×c`) and per-head weights.
pub fn multi_head_cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    f_e: Var,
    f_i: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    cfg.validate()?;
    for (name, v) in [("prior feature", f_e), ("image feature", f_i)] {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != cfg.channels {
            return Err(Error::dim(
                "multi_head_cross_attention",
                format!("{name} {s:?} needs {} channels", cfg.channels),
            ));
        }
    }
    let group = cfg.group();
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let (e_i, x_i) = if cfg.heads == 1 {
            (f_e, f_i)
        } else {
            (
                g.slice_last(f_e, i * group, group)?,
                g.slice_last(f_i, i * group, group)?,
            )
        };
        let wq = p.var(g, &format!("{prefix}/head{i}/wq"))?;
        let wk = p.var(g, &format!("{prefix}/head{i}/wk"))?;
        let wv = p.var(g, &format!("{prefix}/head{i}/wv"))?;
        let (o, w) = cross_attention_head(g, e_i, x_i, wq, wk, wv)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_last(&outs)?
    };
    let wo = p.var(g, &format!("{prefix}/wo"))?;
    Ok((g.matmul(cat, wo)?, weights))
}

/// Self attention: queries, keys and values all come from `x` (`l×c`).
pub fn multi_head_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    multi_head_cross_attention(g, p, prefix, x, x, cfg)
}

pub fn declare_feed_forward(d: &mut Declare, prefix: &str, c: usize, hidden: usize) {
    nn::declare_linear(d, &format!("{prefix}/fc1"), c, hidden, true);
    nn::declare_linear(d, &format!("{prefix}/fc2"), hidden, c, true);
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`. Residuals belong to the caller.
pub fn feed_forward_network<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = nn::apply_linear(g, p, &format!("{prefix}/fc1"), x)?;
    let h = g.relu(h);
    nn::apply_linear(g, p, &format!("{prefix}/fc2"), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn fixed_encoding_examples() {
        let pe = fixed_positional_encoding::<f64>(2, 4).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe.data()[4..].iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let big = fixed_positional_encoding::<f64>(512, 64).unwrap();
        assert!(big.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(fixed_positional_encoding::<f64>(3, 5).is_err());
    }

    #[test]
    fn recurrent_encoding_zero_table_is_zero() {
        let mut d = Declare::new();
        declare_recurrent_encoding(&mut d, "rpe", 2, 3, 4, false);
        let mut store = init_params::<f64>(&d, 3);
        store.tensor_mut("rpe/param").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let mut p = Params::new(&store);
        let out = recurrent_positional_encoding(&mut g, &mut p, "rpe", 2, 3, 4).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_encoding_full_shape() {
        let mut d = Declare::new();
        declare_recurrent_encoding(&mut d, "rpe", 16, 64, 64, false);
        let store = init_params::<f32>(&d, 3);
        let mut g = Graph::new();
        let mut p = Params::new(&store);
        let out = recurrent_positional_encoding(&mut g, &mut p, "rpe", 16, 64, 64).unwrap();
        assert_eq!(g.shape(out), &[16, 64, 64]);
    }

    #[test]
    fn single_key_attention_copies_the_value() {
        let mut g = Graph::new();
        let f_e = g.constant(Tensor::<f64>::from_f64([1, 2], &[0.3, -0.7]).unwrap());
        let f_i = g.constant(Tensor::from_fn([5, 2], |i| (i as f64).sin()));
        let wq = g.constant(Tensor::from_fn([2, 3], |i| i as f64 * 0.1));
        let wk = g.constant(Tensor::from_fn([2, 3], |i| 1.0 - i as f64 * 0.2));
        let wv = g.constant(Tensor::from_fn([2, 3], |i| (i as f64).cos()));
        let (out, w) = cross_attention_head(&mut g, f_e, f_i, wq, wk, wv).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
        let v = g.matmul(f_e, wv).unwrap();
        let want = g.value(v).data().to_vec();
        for row in g.value(out).data().chunks(3) {
            assert_eq!(row, &want[..]);
        }
    }

    #[test]
    fn identical_keys_split_attention_evenly() {
        let mut g = Graph::new();
        let f_e = g.constant(Tensor::<f64>::from_f64([2, 2], &[0.4, 0.1, 0.4, 0.1]).unwrap());
        let f_i = g.constant(Tensor::from_fn([3, 2], |i| i as f64));
        let wq = g.constant(Tensor::from_fn([2, 2], |i| i as f64 + 1.0));
        let wk = g.constant(Tensor::from_fn([2, 2], |i| 0.5 - i as f64));
        let wv = g.constant(Tensor::from_fn([2, 2], |i| i as f64));
        let (_, w) = cross_attention_head(&mut g, f_e, f_i, wq, wk, wv).unwrap();
        assert!(g.value(w).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn head_count_never_changes_output_shape() {
        for heads in [1, 2, 4] {
            let cfg = AttentionConfig {
                heads,
                channels: 8,
                key_dim: 6,
            };
            let mut d = Declare::new();
            declare_multi_head(&mut d, "mca", &cfg);
            let store = init_params::<f64>(&d, heads as u64);
            let mut g = Graph::new();
            let mut p = Params::new(&store);
            let f_e = g.constant(Tensor::from_fn([3, 8], |i| (i as f64 * 0.3).sin()));
            let f_i = g.constant(Tensor::from_fn([10, 8], |i| (i as f64 * 0.2).cos()));
            let (out, w) =
                multi_head_cross_attention(&mut g, &mut p, "mca", f_e, f_i, &cfg).unwrap();
            assert_eq!(g.shape(out), &[10, 8]);
            assert_eq!(w.len(), heads);
            let aw = AttentionWeights::from_heads(&g, &w).unwrap();
            assert!(aw.max_row_error() < 1e-12);
        }
    }

    #[test]
    fn full_geometry_cross_attention() {
        let cfg = AttentionConfig::default();
        let mut d = Declare::new();
        declare_multi_head(&mut d, "mca", &cfg);
        let store = init_params::<f32>(&d, 0);
        let mut g = Graph::new();
        let mut p = Params::new(&store);
        let f_e = g.constant(Tensor::from_fn([16, 64], |i| (i as f32 * 0.01).sin()));
        let f_i = g.constant(Tensor::from_fn([1024, 64], |i| (i as f32 * 0.001).cos()));
        let (out, w) = multi_head_cross_attention(&mut g, &mut p, "mca", f_e, f_i, &cfg).unwrap();
        assert_eq!(g.shape(out), &[1024, 64]);
        let aw = AttentionWeights::from_heads(&g, &w).unwrap();
        assert_eq!(aw.weights.shape(), &[4, 1024, 16]);
        assert!(aw.max_row_error() < 1e-6);
    }

    #[test]
    fn uneven_head_split_is_rejected() {
        let cfg = AttentionConfig {
            heads: 3,
            channels: 8,
            key_dim: 4,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_feed_forward_outputs_zero() {
        let mut d = Declare::new();
        declare_feed_forward(&mut d, "ffn", 4, 6);
        let mut store = init_params::<f64>(&d, 0);
        for (_, prm) in store.iter_mut() {
            prm.tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let mut p = Params::new(&store);
        let x = g.constant(Tensor::from_fn([3, 4], |i| i as f64));
        let y = feed_forward_network(&mut g, &mut p, "ffn", x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_column_bounds() {
        let aw = AttentionWeights {
            weights: Tensor::<f64>::full([2, 4, 3], 1.0 / 3.0),
        };
        assert!(aw.key_column(2).is_ok());
        assert!(matches!(aw.key_column(3), Err(Error::Bounds { .. })));
    }
}
