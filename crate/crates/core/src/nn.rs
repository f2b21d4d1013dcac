//! Parameter storage and the layers shared by the interpreter and the
//! reconstruction network.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, SparseMap, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters keyed by hierarchical path (`"tpgb2/srb/conv1/w"`).
/// Iteration is sorted by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.params.insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Marks every parameter under `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Resets gradients: zero buffers for trainable parameters, none for the rest.
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            if p.trainable {
                p.tensor.zero_grad();
            } else {
                p.tensor.clear_grad();
            }
        }
    }

    pub fn accumulate(&mut self, grads: Vec<(String, Vec<T>)>) -> Result<()> {
        for (name, g) in grads {
            self.tensor_mut(&name)?.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Copies every parameter under `from` to the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str, trainable: bool) {
        let copies: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(from))
            .map(|(k, p)| {
                let mut t = p.tensor.clone();
                t.clear_grad();
                (format!("{to}{}", &k[from.len()..]), t)
            })
            .collect();
        for (k, t) in copies {
            self.insert(k, t, trainable);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Parameter values are bit-identical (gradients ignored).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| {
                    ka == kb && a.trainable == b.trainable && a.tensor.bit_eq(&b.tensor)
                })
    }
}

/// How a declared parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations while a model describes itself.
#[derive(Clone, Debug, Default)]
pub struct Declare {
    specs: Vec<ParamSpec>,
}

impl Declare {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) {
        self.add(name, shape, Init::FanIn(fan_in));
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.add(name, shape, Init::Zeros);
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn count(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

/// Deterministic initialization. Parameters are drawn in sorted-name order
/// from one ChaCha8 stream, in `f64` and then narrowed, so `f32` and `f64`
/// stores from the same seed agree up to rounding.
pub fn init_params<T: Scalar>(decl: &Declare, seed: u64) -> ParamStore<T> {
    let mut specs: Vec<&ParamSpec> = decl.specs().iter().collect();
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| T::lit(rng.gen_range(-bound..bound)))
                    .collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        let t = Tensor::new(spec.shape.clone(), data).expect("declared shape");
        assert!(
            store.get(&spec.name).is_none(),
            "duplicate parameter {}",
            spec.name
        );
        store.insert(spec.name.clone(), t, true);
    }
    store
}

/// Lazily binds store parameters as graph leaves during one forward pass.
pub struct Params<'s, T> {
    store: &'s ParamStore<T>,
    bound: BTreeMap<String, Var>,
}

impl<'s, T: Scalar> Params<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    /// Graph handle of parameter `name`, binding it on first use.
    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        let mut t = p.tensor.clone();
        t.clear_grad();
        let v = g.leaf(t.with_requires_grad(p.trainable));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after `g.backward`.
    pub fn grads(&self, g: &Graph<T>) -> Vec<(String, Vec<T>)> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|gr| (k.clone(), gr.to_vec())))
            .collect()
    }
}

/// Affine map on the last axis: `x · w + b`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    let sw = g.shape(w).to_vec();
    let cin = *sx
        .last()
        .ok_or_else(|| Error::dim("linear", "scalar input"))?;
    if sw.len() != 2 || sw[0] != cin {
        return Err(Error::dim(
            "linear",
            format!("input {sx:?} with weight {sw:?}"),
        ));
    }
    let rows = sx.iter().product::<usize>() / cin.max(1);
    let flat = if sx.len() == 2 {
        x
    } else {
        g.reshape(x, &[rows, cin])?
    };
    let mut y = g.matmul(flat, w)?;
    if let Some(b) = b {
        y = g.add_row(y, b)?;
    }
    if sx.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = sx;
    *out_shape.last_mut().unwrap() = sw[1];
    g.reshape(y, &out_shape)
}

pub fn conv2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    padding: Padding,
) -> Result<Var> {
    let y = g.conv2d(x, kernel, padding)?;
    match bias {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

pub fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gain: Var,
    bias: Var,
    eps: T,
) -> Result<Var> {
    g.layer_norm(x, gain, bias, eps)
}

/// Declares a linear layer `prefix/w` (`cin×cout`) and `prefix/b`.
pub fn declare_linear(d: &mut Declare, prefix: &str, cin: usize, cout: usize, bias: bool) {
    d.weight(format!("{prefix}/w"), &[cin, cout], cin);
    if bias {
        d.zeros(format!("{prefix}/b"), &[cout]);
    }
}

pub fn apply_linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = p.var(g, &format!("{prefix}/w"))?;
    let bname = format!("{prefix}/b");
    let b = if p.has(&bname) {
        Some(p.var(g, &bname)?)
    } else {
        None
    };
    linear(g, x, w, b)
}

pub fn declare_conv(d: &mut Declare, prefix: &str, k: usize, cin: usize, cout: usize) {
    declare_conv_rect(d, prefix, k, k, cin, cout);
}

pub fn declare_conv_rect(
    d: &mut Declare,
    prefix: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) {
    d.weight(format!("{prefix}/w"), &[kh, kw, cin, cout], kh * kw * cin);
    d.zeros(format!("{prefix}/b"), &[cout]);
}

pub fn apply_conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = p.var(g, &format!("{prefix}/w"))?;
    let b = p.var(g, &format!("{prefix}/b"))?;
    conv2d(g, x, w, Some(b), Padding::Same)
}

pub fn declare_layer_norm(d: &mut Declare, prefix: &str, c: usize) {
    d.add(format!("{prefix}/gain"), &[c], Init::Ones);
    d.zeros(format!("{prefix}/bias"), &[c]);
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn apply_layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = p.var(g, &format!("{prefix}/gain"))?;
    let bias = p.var(g, &format!("{prefix}/bias"))?;
    layer_norm(g, x, gain, bias, T::lit(LAYER_NORM_EPS))
}

fn shuffle_index(h: usize, w: usize, c_out: usize, r: usize) -> Vec<usize> {
    let cin = c_out * r * r;
    let (oh, ow) = (h * r, w * r);
    let mut index = Vec::with_capacity(oh * ow * c_out);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c_out {
                let src_c = ch * r * r + r * (y % r) + (x % r);
                index.push(((y / r) * w + x / r) * cin + src_c);
            }
        }
    }
    index
}

/// `h×w×(r²c) → rh×rw×c` with
/// `out(y, x, ch) = in(⌊y/r⌋, ⌊x/r⌋, ch·r² + r·(y mod r) + (x mod r))`.
pub fn pixel_shuffle<T: Scalar>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || r == 0 || s[2] % (r * r) != 0 {
        return Err(Error::dim(
            "pixel_shuffle",
            format!("{s:?} channels not divisible by r²={}", r * r),
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2] / (r * r));
    let index = shuffle_index(h, w, c, r);
    g.gather(x, Arc::new(index), vec![h * r, w * r, c])
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || r == 0 || s[0] % r != 0 || s[1] % r != 0 {
        return Err(Error::dim(
            "pixel_unshuffle",
            format!("{s:?} not divisible by {r}"),
        ));
    }
    let (h, w, c) = (s[0] / r, s[1] / r, s[2]);
    let fwd = shuffle_index(h, w, c, r);
    let mut inv = vec![0; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i] = o;
    }
    g.gather(x, Arc::new(inv), vec![h, w, c * r * r])
}

/// Average pooling with an `fh×fw` window and equal stride over `h×w×c`.
pub fn avg_pool_map<T: Scalar>(h: usize, w: usize, c: usize, fh: usize, fw: usize) -> SparseMap<T> {
    let (oh, ow) = (h / fh, w / fw);
    let weight = T::lit(1.0 / (fh * fw) as f64);
    let rows = (0..oh).flat_map(move |oy| {
        (0..ow).flat_map(move |ox| {
            (0..c).map(move |ch| {
                let mut row = Vec::with_capacity(fh * fw);
                for dy in 0..fh {
                    for dx in 0..fw {
                        row.push((((oy * fh + dy) * w + ox * fw + dx) * c + ch, weight));
                    }
                }
                row
            })
        })
    });
    SparseMap::from_rows(h * w * c, rows)
}

pub fn avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var, fh: usize, fw: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || fh == 0 || fw == 0 || s[0] % fh != 0 || s[1] % fw != 0 {
        return Err(Error::dim("avg_pool", format!("{s:?} by {fh}x{fw}")));
    }
    let map = avg_pool_map::<T>(s[0], s[1], s[2], fh, fw);
    g.sparse(x, Arc::new(map), vec![s[0] / fh, s[1] / fw, s[2]])
}

/// Parameters of one gated recurrent cell with input and hidden width `c`.
pub fn declare_gated_cell(d: &mut Declare, prefix: &str, c: usize) {
    for gate in ["z", "h"] {
        d.weight(format!("{prefix}/w{gate}"), &[c, c], c);
        d.weight(format!("{prefix}/u{gate}"), &[c, c], c);
        d.zeros(format!("{prefix}/b{gate}"), &[c]);
    }
}

/// Runs one gated cell along axis 1 of `x` (`[sequences × steps × c]`).
pub fn gated_scan<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
    reverse: bool,
) -> Result<Var> {
    let wz = p.var(g, &format!("{prefix}/wz"))?;
    let bz = p.var(g, &format!("{prefix}/bz"))?;
    let wh = p.var(g, &format!("{prefix}/wh"))?;
    let bh = p.var(g, &format!("{prefix}/bh"))?;
    let uz = p.var(g, &format!("{prefix}/uz"))?;
    let uh = p.var(g, &format!("{prefix}/uh"))?;
    let az = linear(g, x, wz, Some(bz))?;
    let ah = linear(g, x, wh, Some(bh))?;
    g.gated_scan(az, ah, uz, uh, reverse)
}

pub fn declare_row_scan(d: &mut Declare, prefix: &str, c: usize) {
    declare_gated_cell(d, &format!("{prefix}/fwd"), c);
    declare_gated_cell(d, &format!("{prefix}/bwd"), c);
    declare_linear(d, &format!("{prefix}/proj"), c, c, true);
}

/// For each row of an `h×w×c` map: a gated pass left→right and one
/// right→left, summed and projected back to `c` channels.
pub fn bidirectional_row_scan<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    if g.shape(x).len() != 3 {
        return Err(Error::dim(
            "bidirectional_row_scan",
            format!("{:?}", g.shape(x)),
        ));
    }
    let fwd = gated_scan(g, p, &format!("{prefix}/fwd"), x, false)?;
    let bwd = gated_scan(g, p, &format!("{prefix}/bwd"), x, true)?;
    let both = g.add(fwd, bwd)?;
    apply_linear(g, p, &format!("{prefix}/proj"), both)
}

/// Same scan run down the columns (height axis) of an `h×w×c` map.
pub fn bidirectional_column_scan<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let t = g.swap_leading(x)?;
    let y = bidirectional_row_scan(g, p, prefix, t)?;
    g.swap_leading(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan_store(c: usize, seed: u64) -> ParamStore<f64> {
        let mut d = Declare::new();
        declare_row_scan(&mut d, "s", c);
        init_params(&d, seed)
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::from_fn([3, 4, 2], |i| (i as f64).sin()));
        let k = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = conv2d(&mut g, x, k, None, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn ones_kernel_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full([5, 5, 1], 1.0));
        let k = g.constant(Tensor::full([3, 3, 1, 1], 1.0));
        let y = conv2d(&mut g, x, k, None, Padding::Same).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(&[2, 2, 0]), 9.0);
        assert_eq!(v.at(&[0, 0, 0]), 4.0);
        let y = conv2d(&mut g, x, k, None, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[3, 3, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([4, 4, 2]));
        let k = g.constant(Tensor::zeros([3, 3, 3, 1]));
        assert!(matches!(
            g.conv2d(x, k, Padding::Same),
            Err(Error::Dimension { .. })
        ));
        let k = g.constant(Tensor::zeros([2, 2, 2, 1]));
        assert!(g.conv2d(x, k, Padding::Same).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::from_f64([1, 2], &[1.0, 1.0]).unwrap());
        let w = g.constant(Tensor::from_f64([2, 1], &[1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_f64([1], &[0.5]).unwrap());
        let y = linear(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);

        let x = g.constant(Tensor::<f64>::from_fn([2, 3, 2], |i| i as f64 - 4.0));
        let eye = g.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = g.constant(Tensor::zeros([2]));
        let y = linear(&mut g, x, eye, Some(zero)).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 2]);
        assert_eq!(g.value(y).data(), g.value(x).data());

        let bad = g.constant(Tensor::zeros([3, 2]));
        assert!(linear(&mut g, x, bad, None).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::<f64>::full([4], 1.0));
        let bias = g.constant(Tensor::zeros([4]));
        let x = g.constant(Tensor::full([2, 4], 7.5));
        let y = layer_norm(&mut g, x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gain = g.constant(Tensor::<f64>::full([2], 1.0));
        let bias = g.constant(Tensor::zeros([2]));
        let x = g.constant(Tensor::from_f64([2], &[1.0, 3.0]).unwrap());
        let y = layer_norm(&mut g, x, gain, bias, 1e-14).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_ignores_constant_offset() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::<f64>::full([5], 1.0));
        let bias = g.constant(Tensor::zeros([5]));
        let base = Tensor::<f64>::from_fn([3, 5], |i| ((i * 7) as f64).sin());
        let shifted = base.map(|v| v + 3.25);
        let a = g.constant(base);
        let b = g.constant(shifted);
        let ya = layer_norm(&mut g, a, gain, bias, 1e-5).unwrap();
        let yb = layer_norm(&mut g, b, gain, bias, 1e-5).unwrap();
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-9);
    }

    #[test]
    fn pixel_shuffle_definition_instance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::from_f64([1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = pixel_shuffle(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_full_geometry_and_inverse() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f32>::from_fn([16, 64, 256], |i| i as f32));
        let y = pixel_shuffle(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(y), &[32, 128, 64]);
        let back = pixel_unshuffle(&mut g, y, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2, 2, 6]));
        assert!(matches!(
            pixel_shuffle(&mut g, x, 2),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_input_zero_bias_scan_is_zero() {
        let store = scan_store(3, 5);
        let mut g = Graph::new();
        let mut p = Params::new(&store);
        let x = g.constant(Tensor::zeros([2, 4, 3]));
        let y = bidirectional_row_scan(&mut g, &mut p, "s", x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_scan_is_direction_symmetric() {
        let store = scan_store(3, 9);
        let mut g = Graph::new();
        let mut p = Params::new(&store);
        let x = g.constant(Tensor::<f64>::from_fn([4, 1, 3], |i| {
            (i as f64 * 0.7).cos()
        }));
        let f = gated_scan(&mut g, &mut p, "s/fwd", x, false).unwrap();
        let b = gated_scan(&mut g, &mut p, "s/fwd", x, true).unwrap();
        assert_eq!(g.value(f).data(), g.value(b).data());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = scan_store(4, 1);
        let b = scan_store(4, 1);
        let c = scan_store(4, 2);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert_eq!(a.count(), 2 * (2 * 16 * 2 + 2 * 4) + 16 + 4);
        for (_, p) in a.iter() {
            let bound = if p.tensor.ndim() == 2 { 0.5 } else { 0.0 };
            assert!(p.tensor.data().iter().all(|v| v.abs() <= bound));
        }
    }
}
