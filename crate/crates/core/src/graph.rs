//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward op in creation order, which is already a
//! topological order. [`Graph::backward`] replays the tape once in reverse and
//! then drops the saved activations; a consumed graph rejects a second
//! backward.
//!
//! Shapes never broadcast implicitly. Row vectors combine with matrices only
//! through [`Graph::add_row`] / [`Graph::mul_row`], and scalars only through
//! [`Graph::scale`] / [`Graph::add_scalar`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ScanGeom, ScanTrace};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Abs,
    Sigmoid,
    Tanh,
    Relu,
    Square,
}

/// Fixed sparse linear map `out[i] = Σ w_ij · x[j]` in CSR form. Warps,
/// pooling and window averages are all instances.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    in_len: usize,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    /// Builds a map from per-output-row `(input index, weight)` lists.
    pub fn from_rows(in_len: usize, rows: impl IntoIterator<Item = Vec<(usize, T)>>) -> Self {
        let mut row_start = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (j, w) in row {
                assert!(j < in_len, "sparse column {j} out of range {in_len}");
                cols.push(j as u32);
                weights.push(w);
            }
            row_start.push(cols.len());
        }
        Self {
            in_len,
            row_start,
            cols,
            weights,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.in_len);
        (0..self.out_len())
            .map(|i| {
                let (a, b) = (self.row_start[i], self.row_start[i + 1]);
                let mut acc = T::zero();
                for k in a..b {
                    acc = acc + self.weights[k] * x[self.cols[k] as usize];
                }
                acc
            })
            .collect()
    }

    fn apply_transpose(&self, dy: &[T], dx: &mut [T]) {
        for i in 0..self.out_len() {
            let g = dy[i];
            if g == T::zero() {
                continue;
            }
            for k in self.row_start[i]..self.row_start[i + 1] {
                let j = self.cols[k] as usize;
                dx[j] = dx[j] + self.weights[k] * g;
            }
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    SymSum3(Var, Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Sparse {
        x: Var,
        map: Arc<SparseMap<T>>,
    },
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatLast(Vec<Var>),
    Scan {
        az: Var,
        ah: Var,
        uz: Var,
        uh: Var,
        geom: ScanGeom,
        trace: ScanTrace<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Unary(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::SymSum3(a, b, c) => vec![*a, *b, *c],
            Op::AddRow(x, r) | Op::MulRow(x, r) => vec![*x, *r],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::Gather { x, .. } | Op::Sparse { x, .. } | Op::SliceLast { x, .. } => vec![*x],
            Op::ConcatLast(parts) => parts.clone(),
            Op::Scan { az, ah, uz, uh, .. } => vec![*az, *ah, *uz, *uh],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    finite: bool,
    grad: Option<Vec<T>>,
}

/// Recorded computation over tensors of element type `T`.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
        let finite = value.all_finite();
        debug_assert!(
            !inputs_finite || finite,
            "non-finite output from finite inputs at node {}",
            self.nodes.len()
        );
        let (value, op) = if tracked {
            (value, op)
        } else {
            (value, Op::Leaf)
        };
        self.nodes.push(Node {
            value,
            op,
            tracked,
            finite,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        let finite = t.all_finite();
        let value = t.with_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
            finite,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let t = &self.nodes[v.0].value;
        debug_assert_eq!(t.numel(), 1);
        t.data()[0]
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::new([m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("{s:?} is not a matrix")));
        }
        let (r, c) = (s[0], s[1]);
        let index: Vec<usize> = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.gather(x, Arc::new(index), vec![c, r])
    }

    /// Swaps the first two axes of a rank-3 tensor (`h×w×c → w×h×c`).
    pub fn swap_leading(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("swap_leading", format!("{s:?} is not rank 3")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut index = Vec::with_capacity(h * w * c);
        for xi in 0..w {
            for yi in 0..h {
                for ci in 0..c {
                    index.push((yi * w + xi) * c + ci);
                }
            }
        }
        self.gather(x, Arc::new(index), vec![w, h, c])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// `a + b + c` summed in ascending value order per element, so the
    /// result is bit-identical under any permutation of the arguments.
    pub fn sym_sum3(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        same_shape("sym_sum3", self.shape(a), self.shape(b))?;
        same_shape("sym_sum3", self.shape(a), self.shape(c))?;
        let (ta, tb, tc) = (self.value(a), self.value(b), self.value(c));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .zip(tc.data())
            .map(|((&x, &y), &z)| {
                let mut v = [x, y, z];
                v.sort_by(|p, q| p.partial_cmp(q).unwrap_or(std::cmp::Ordering::Equal));
                (v[0] + v[1]) + v[2]
            })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::SymSum3(a, b, c)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v + s);
        self.push(t, Op::AddScalar(x))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
            Unary::Abs => |v| v.abs(),
            Unary::Sigmoid => |v| T::one() / (T::one() + (-v).exp()),
            Unary::Tanh => |v| v.tanh(),
            Unary::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Unary::Square => |v| v * v,
        };
        let t = self.value(x).map(f);
        self.push(t, Op::Unary(x, kind))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    fn row_check(&self, x: Var, row: Var, name: &'static str) -> Result<usize> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let c = *sx.last().ok_or_else(|| Error::dim(name, "scalar input"))?;
        if sr != [c] {
            return Err(Error::dim(name, format!("{sx:?} with row {sr:?}")));
        }
        Ok(c)
    }

    /// `x[..., j] + row[j]`
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check(x, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(c) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v = *v + b;
            }
        }
        Ok(self.push(t, Op::AddRow(x, row)))
    }

    /// `x[..., j] * row[j]`
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check(x, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(c) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v = *v * b;
            }
        }
        Ok(self.push(t, Op::MulRow(x, row)))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let n = t.last_dim();
        if n == 0 {
            return Err(Error::dim("softmax_lastdim", "empty last axis"));
        }
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let n = t.last_dim();
        if n == 0 {
            return Err(Error::dim("log_softmax_lastdim", "empty last axis"));
        }
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        Ok(self.push(t, Op::LogSoftmax(x)))
    }

    /// Standardizes each last-axis slice (biased variance), then applies
    /// `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let c = self.row_check(x, gain, "layer_norm")?;
        self.row_check(x, bias, "layer_norm")?;
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        let rows = t.numel() / c;
        let mut xhat = vec![T::zero(); t.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let cf = T::lit(c as f64);
        for (r, row) in t.data_mut().chunks_mut(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                xhat[r * c + j] = xh;
                row[j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Cross-correlation of an `h×w×cin` image with a `kh×kw×cin×cout`
    /// kernel, stride 1. `Same` zero-pads (odd kernels only).
    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {sx:?}, kernel {sk:?}")));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, kc, cout) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kc}"),
            ));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::dim(
                        "conv2d",
                        format!("same padding needs odd kernel, got {kh}x{kw}"),
                    ));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::dim(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than {h}x{w}"),
                    ));
                }
                (0, 0)
            }
        };
        let geom = ConvGeom {
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            pad_h,
            pad_w,
            out_h: h + 2 * pad_h + 1 - kh,
            out_w: w + 2 * pad_w + 1 - kw,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.out_pixels() * cout];
        kernels::gemm_nn(
            &cols,
            self.value(kernel).data(),
            &mut out,
            geom.out_pixels(),
            geom.patch(),
            cout,
        );
        let t = Tensor::new([geom.out_h, geom.out_w, cout], out)?;
        let tracked = self.is_tracked(x) || self.is_tracked(kernel);
        let cols = if tracked { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                kernel,
                cols,
                geom,
            },
        ))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Bounds {
                index: bad,
                limit: src.len(),
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// Applies a fixed sparse linear map to the flattened input.
    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap<T>>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        if src.numel() != map.in_len() {
            return Err(Error::dim(
                "sparse",
                format!("map expects {} inputs, got {:?}", map.in_len(), src.shape()),
            ));
        }
        let t = Tensor::new(shape, map.apply(src.data()))?;
        Ok(self.push(t, Op::Sparse { x, map }))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s
            .last()
            .ok_or_else(|| Error::dim("slice_last", "scalar input"))?;
        if start + len > c {
            return Err(Error::dim(
                "slice_last",
                format!("{start}..{} of {c}", start + len),
            ));
        }
        let rows = self.value(x).numel() / c.max(1);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start, len }))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_last", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim(
                    "concat_last",
                    format!("{:?} vs leading {lead:?}", s),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatLast(parts.to_vec())))
    }

    /// Gated recurrent scan over `[sequences × steps × width]` projections.
    /// See [`kernels::scan_forward`] for the cell.
    pub fn gated_scan(&mut self, az: Var, ah: Var, uz: Var, uh: Var, reverse: bool) -> Result<Var> {
        let s = self.shape(az).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(
                "gated_scan",
                format!("projections {s:?} are not rank 3"),
            ));
        }
        same_shape("gated_scan", &s, self.shape(ah))?;
        let c = s[2];
        same_shape("gated_scan", &[c, c], self.shape(uz))?;
        same_shape("gated_scan", &[c, c], self.shape(uh))?;
        let geom = ScanGeom {
            sequences: s[0],
            steps: s[1],
            width: c,
            reverse,
        };
        let (out, trace) = kernels::scan_forward(
            self.value(az).data(),
            self.value(ah).data(),
            self.value(uz).data(),
            self.value(uh).data(),
            &geom,
        );
        let t = Tensor::new(s, out)?;
        Ok(self.push(
            t,
            Op::Scan {
                az,
                ah,
                uz,
                uh,
                geom,
                trace,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Populates gradients of tracked
    /// leaves, then releases the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].grad = Some(g);
                continue;
            }
            for (input, contrib) in self.input_grads(i, &g) {
                if self.nodes[input.0].tracked {
                    add_into(&mut grads[input.0], contrib);
                }
            }
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Leaf;
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, m, k, n } => {
                let mut res = Vec::new();
                if tracked(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(g, val(*b), &mut da, *m, *k, *n);
                    res.push((*a, da));
                }
                if tracked(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(val(*a), g, &mut db, *m, *k, *n);
                    res.push((*b, db));
                }
                res
            }
            Op::Reshape(x) | Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::SymSum3(a, b, c) => vec![(*a, g.to_vec()), (*b, g.to_vec()), (*c, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect()),
                    (*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(&d, &y)| d / y).collect()),
                    (
                        *b,
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(&d, (&x, &y))| -d * x / (y * y))
                            .collect(),
                    ),
                ]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&d| d * *s).collect())],
            Op::Unary(x, kind) => {
                let vx = val(*x);
                let dx = g
                    .iter()
                    .zip(vx.iter().zip(out))
                    .map(|(&d, (&xv, &y))| match kind {
                        Unary::Exp => d * y,
                        Unary::Log => d / xv,
                        Unary::Abs => {
                            if xv > T::zero() {
                                d
                            } else if xv < T::zero() {
                                -d
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Sigmoid => d * y * (T::one() - y),
                        Unary::Tanh => d * (T::one() - y * y),
                        Unary::Relu => {
                            if xv > T::zero() {
                                d
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Square => d * (xv + xv),
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::AddRow(x, r) => {
                let c = val(*r).len();
                let mut dr = vec![T::zero(); c];
                for chunk in g.chunks(c) {
                    for (a, &v) in dr.iter_mut().zip(chunk) {
                        *a = *a + v;
                    }
                }
                vec![(*x, g.to_vec()), (*r, dr)]
            }
            Op::MulRow(x, r) => {
                let row = val(*r);
                let vx = val(*x);
                let c = row.len();
                let mut dr = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for (ri, chunk) in g.chunks(c).enumerate() {
                    for j in 0..c {
                        dx[ri * c + j] = chunk[j] * row[j];
                        dr[j] = dr[j] + chunk[j] * vx[ri * c + j];
                    }
                }
                vec![(*x, dx), (*r, dr)]
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let mut dx = vec![T::zero(); g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                let mut dx = vec![T::zero(); g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s: T = gr.iter().copied().sum();
                    for j in 0..n {
                        dxr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let c = gv.len();
                let cf = T::lit(c as f64);
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut dxh = vec![T::zero(); c];
                for r in 0..g.len() / c {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        dg[j] = dg[j] + gr[j] * xr[j];
                        db[j] = db[j] + gr[j];
                        dxh[j] = gr[j] * gv[j];
                        s1 = s1 + dxh[j];
                        s2 = s2 + dxh[j] * xr[j];
                    }
                    let inv = inv_std[r];
                    for j in 0..c {
                        dx[r * c + j] = inv / cf * (cf * dxh[j] - s1 - xr[j] * s2);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Conv2d {
                x,
                kernel,
                cols,
                geom,
            } => {
                let mut res = Vec::new();
                let (p, m, n) = (geom.patch(), geom.out_pixels(), geom.cout);
                if tracked(*kernel) {
                    let mut dk = vec![T::zero(); p * n];
                    kernels::gemm_tn(cols, g, &mut dk, m, p, n);
                    res.push((*kernel, dk));
                }
                if tracked(*x) {
                    let mut dcols = vec![T::zero(); m * p];
                    kernels::gemm_nt(g, val(*kernel), &mut dcols, m, p, n);
                    let mut dx = vec![T::zero(); geom.h * geom.w * geom.cin];
                    kernels::col2im(&dcols, geom, &mut dx);
                    res.push((*x, dx));
                }
                res
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&j, &d) in index.iter().zip(g) {
                    dx[j] = dx[j] + d;
                }
                vec![(*x, dx)]
            }
            Op::Sparse { x, map } => {
                let mut dx = vec![T::zero(); map.in_len()];
                map.apply_transpose(g, &mut dx);
                vec![(*x, dx)]
            }
            Op::SliceLast { x, start, len } => {
                let c = self.nodes[x.0].value.last_dim();
                let mut dx = vec![T::zero(); val(*x).len()];
                for (r, chunk) in g.chunks(*len).enumerate() {
                    dx[r * c + start..r * c + start + len].copy_from_slice(chunk);
                }
                vec![(*x, dx)]
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let wd = self.nodes[p.0].value.last_dim();
                    let mut dp = Vec::with_capacity(val(p).len());
                    for chunk in g.chunks(total) {
                        dp.extend_from_slice(&chunk[offset..offset + wd]);
                    }
                    offset += wd;
                    res.push((p, dp));
                }
                res
            }
            Op::Scan {
                az,
                ah,
                uz,
                uh,
                geom,
                trace,
            } => {
                let grads = kernels::scan_backward(out, trace, val(*uz), val(*uh), g, geom);
                vec![
                    (*az, grads.az),
                    (*ah, grads.ah),
                    (*uz, grads.uz),
                    (*uh, grads.uh),
                ]
            }
        }
    }
}

/// Central finite-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) - f(x - h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    step: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    let two_h = step + step;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_h);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

/// Largest element-wise relative error between two gradients, with a floor
/// of `floor` on the denominator so near-zero components compare absolutely.
pub fn relative_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[0.3, -1.2, 4.0, 2.5]));
        let out = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(out).data(), g.value(b).data());
    }

    #[test]
    fn matmul_row_sums() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 7.0]);
        assert_eq!(g.shape(out), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let y = g.softmax_lastdim(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[0.0, std::f64::consts::LN_2]));
        let y = g.softmax_lastdim(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
        let x = g.constant(t(&[2], &[1000.0, 1000.0]));
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::from_fn([2, 3, 2], |i| i as f64).with_requires_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn finite_difference_examples() {
        let x = t(&[1], &[3.0]);
        let fd = finite_diff_gradient(|v| v.data().iter().map(|a| a * a).sum(), &x, 1e-5);
        assert!((fd.data()[0] - 6.0).abs() < 1e-8);

        // d softmax_0 / dx at [0, 0] = [p0(1-p0), -p0 p1] = [0.25, -0.25]
        let x = t(&[2], &[0.0, 0.0]);
        let fd = finite_diff_gradient(
            |v| {
                let mut g = Graph::new();
                let a = g.constant(v.clone());
                let s = g.softmax_lastdim(a).unwrap();
                g.value(s).data()[0]
            },
            &x,
            1e-5,
        );
        assert!((fd.data()[0] - 0.25).abs() < 1e-9);
        assert!((fd.data()[1] + 0.25).abs() < 1e-9);

        let fd = finite_diff_gradient(|_| 4.2, &t(&[3], &[1.0, 2.0, 3.0]), 1e-5);
        assert!(fd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(Tensor::<f32>::from_fn([7, 5], |i| (i as f32 * 0.31).sin()));
            let b = g.constant(Tensor::<f32>::from_fn([5, 9], |i| (i as f32 * 0.17).cos()));
            let m = g.matmul(a, b).unwrap();
            let s = g.softmax_lastdim(m).unwrap();
            g.value(s).clone()
        };
        assert!(run().bit_eq(&run()));
    }
}
