//! Training losses and evaluation metrics.
//!
//! SSIM statistics are taken over non-overlapping square windows of the
//! luminance channel and averaged; [`Windowing::Global`] uses one window
//! spanning the whole image. All `σ` terms are (co)variances, computed from
//! deviations about the window mean.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, SparseMap, Var};
use crate::synth::warp::{self, DeformationSpec};
use crate::tensor::{Scalar, Tensor};

pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const C1: f64 = K1 * K1;
pub const C2: f64 = K2 * K2;
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Smoothing inside the logarithms of the prior divergence.
pub const PRIOR_EPS: f64 = 1e-8;
pub const DEFAULT_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.beta >= 0.0 {
            Ok(())
        } else {
            Err(Error::Contract(format!("negative loss weight: {self:?}")))
        }
    }

    /// `l_sr + α·l_tp + β·l_tsc` on plain numbers.
    pub fn combine(&self, l_sr: f64, l_tp: f64, l_tsc: f64) -> f64 {
        l_sr + self.alpha * l_tp + self.beta * l_tsc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Windowing {
    Window(usize),
    Global,
}

impl Default for Windowing {
    fn default() -> Self {
        Windowing::Window(DEFAULT_WINDOW)
    }
}

pub fn l_sr<T: Scalar>(g: &mut Graph<T>, sr: Var, hr: Var) -> Result<Var> {
    let d = g.sub(sr, hr)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Mean absolute difference plus mean per-row `KL(target ‖ prediction)`.
/// The target is detached.
pub fn l_tp<T: Scalar>(g: &mut Graph<T>, p_lr: Var, p_hr_target: Var) -> Result<Var> {
    for (v, name) in [(p_lr, "prediction"), (p_hr_target, "target")] {
        if g.value(v).data().iter().any(|x| *x < T::zero()) {
            return Err(Error::Contract(format!(
                "negative probability in {name} prior"
            )));
        }
    }
    let s = g.shape(p_lr).to_vec();
    if s.len() != 2 {
        return Err(Error::dim("l_tp", format!("{s:?} is not l×|A|")));
    }
    let t = g.detach(p_hr_target);
    let diff = g.sub(p_lr, t)?;
    let ad = g.abs(diff);
    let l1 = g.mean(ad);
    let eps = T::lit(PRIOR_EPS);
    let log_t = g.value(t).map(|v| (v + eps).ln());
    let log_t = g.constant(log_t);
    let p_eps = g.add_scalar(p_lr, eps);
    let log_p = g.log(p_eps);
    let gap = g.sub(log_t, log_p)?;
    let kl_terms = g.mul(t, gap)?;
    let kl_sum = g.sum(kl_terms);
    let kl = g.scale(kl_sum, T::lit(1.0 / s[0] as f64));
    g.add(l1, kl)
}

/// `h×w×3` → `h×w` luminance; rank-2 inputs pass through.
pub fn luminance<T: Scalar>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    let s = g.shape(img).to_vec();
    match s.as_slice() {
        [_, _] => Ok(img),
        [h, w, 3] => {
            let flat = g.reshape(img, &[h * w, 3])?;
            let weights = g.constant(Tensor::from_f64([3, 1], &LUMA)?);
            let y = g.matmul(flat, weights)?;
            g.reshape(y, &[*h, *w])
        }
        _ => Err(Error::dim("luminance", format!("{s:?} is not h×w×3"))),
    }
}

/// Averaging operator from an `h×w` map to one value per window.
pub fn window_mean_map<T: Scalar>(
    h: usize,
    w: usize,
    windowing: Windowing,
) -> Result<SparseMap<T>> {
    let (wh, ww) = match windowing {
        Windowing::Global => (h, w),
        Windowing::Window(k) => (k, k),
    };
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::dim(
            "ssim_windows",
            format!("{h}x{w} image with {wh}x{ww} windows"),
        ));
    }
    let weight = T::lit(1.0 / (wh * ww) as f64);
    let rows = (0..h / wh).flat_map(|by| {
        (0..w / ww).map(move |bx| {
            let mut row = Vec::with_capacity(wh * ww);
            for y in by * wh..(by + 1) * wh {
                for x in bx * ww..(bx + 1) * ww {
                    row.push((y * w + x, weight));
                }
            }
            row
        })
    });
    Ok(SparseMap::from_rows(h * w, rows))
}

/// Broadcasts one value per window back onto the `h×w` pixels.
fn window_expand_map<T: Scalar>(h: usize, w: usize, windowing: Windowing) -> Result<SparseMap<T>> {
    let (wh, ww) = match windowing {
        Windowing::Global => (h, w),
        Windowing::Window(k) => (k, k),
    };
    let per_row = w / ww;
    let nw = (h / wh) * per_row;
    let rows = (0..h * w).map(|p| vec![((p / w / wh) * per_row + (p % w) / ww, T::one())]);
    Ok(SparseMap::from_rows(nw, rows))
}

struct WindowStats {
    mean: Vec<Var>,
    /// `cov[i][j]` for `i ≤ j`.
    cov: Vec<Vec<Option<Var>>>,
}

fn window_stats<T: Scalar>(
    g: &mut Graph<T>,
    imgs: &[Var],
    windowing: Windowing,
) -> Result<WindowStats> {
    let mut lum = Vec::with_capacity(imgs.len());
    for &im in imgs {
        lum.push(luminance(g, im)?);
    }
    let s0 = g.shape(lum[0]).to_vec();
    for &l in &lum[1..] {
        if g.shape(l) != s0.as_slice() {
            return Err(Error::dim("ssim", format!("{s0:?} vs {:?}", g.shape(l))));
        }
    }
    let map = Arc::new(window_mean_map::<T>(s0[0], s0[1], windowing)?);
    let nw = map.out_len();
    let mut mean = Vec::new();
    for &l in &lum {
        mean.push(g.sparse(l, map.clone(), vec![nw])?);
    }
    let (h, w) = (s0[0], s0[1]);
    let expand = Arc::new(window_expand_map::<T>(h, w, windowing)?);
    let mut dev = Vec::with_capacity(lum.len());
    for (&l, &m) in lum.iter().zip(&mean) {
        let back = g.sparse(m, expand.clone(), vec![h, w])?;
        dev.push(g.sub(l, back)?);
    }
    let n = lum.len();
    let mut cov = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let prod = g.mul(dev[i], dev[j])?;
            cov[i][j] = Some(g.sparse(prod, map.clone(), vec![nw])?);
        }
    }
    Ok(WindowStats { mean, cov })
}

impl WindowStats {
    fn cov(&self, i: usize, j: usize) -> Var {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.cov[a][b].expect("upper triangle filled")
    }
}

/// Pairwise SSIM, averaged over windows.
pub fn ssim<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, windowing: Windowing) -> Result<Var> {
    let st = window_stats(g, &[x, y], windowing)?;
    let (c1, c2) = (T::lit(C1), T::lit(C2));
    let mxy = g.mul(st.mean[0], st.mean[1])?;
    let mxx = g.mul(st.mean[0], st.mean[0])?;
    let myy = g.mul(st.mean[1], st.mean[1])?;
    let two_mxy = g.scale(mxy, T::lit(2.0));
    let n1 = g.add_scalar(two_mxy, c1);
    let two_sxy = g.scale(st.cov(0, 1), T::lit(2.0));
    let n2 = g.add_scalar(two_sxy, c2);
    let msum = g.add(mxx, myy)?;
    let d1 = g.add_scalar(msum, c1);
    let ssum = g.add(st.cov(0, 0), st.cov(1, 1))?;
    let d2 = g.add_scalar(ssum, c2);
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let q = g.div(num, den)?;
    Ok(g.mean(q))
}

/// Three-way SSIM: per window
/// `(Σμᵢμⱼ + C1)(Σσᵢⱼ + C2) / ((Σμᵢ² + C1)(Σσᵢ² + C2))` over the three
/// unordered pairs, averaged over windows. The three-term sums are
/// evaluated order-independently, so the value is exactly symmetric.
pub fn tssim<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    y: Var,
    z: Var,
    windowing: Windowing,
) -> Result<Var> {
    let st = window_stats(g, &[x, y, z], windowing)?;
    let (c1, c2) = (T::lit(C1), T::lit(C2));
    let m = &st.mean;
    let mxy = g.mul(m[0], m[1])?;
    let myz = g.mul(m[1], m[2])?;
    let mxz = g.mul(m[0], m[2])?;
    let mxx = g.mul(m[0], m[0])?;
    let myy = g.mul(m[1], m[1])?;
    let mzz = g.mul(m[2], m[2])?;
    let cross_m = g.sym_sum3(mxy, myz, mxz)?;
    let n1 = g.add_scalar(cross_m, c1);
    let cross_s = g.sym_sum3(st.cov(0, 1), st.cov(1, 2), st.cov(0, 2))?;
    let n2 = g.add_scalar(cross_s, c2);
    let self_m = g.sym_sum3(mxx, myy, mzz)?;
    let d1 = g.add_scalar(self_m, c1);
    let self_s = g.sym_sum3(st.cov(0, 0), st.cov(1, 1), st.cov(2, 2))?;
    let d2 = g.add_scalar(self_s, c2);
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let q = g.div(num, den)?;
    Ok(g.mean(q))
}

/// `1 − TSSIM(D(F(Y)), F(D(Y)), D(X))` from its three already-built images.
pub fn tsc_from_parts<T: Scalar>(
    g: &mut Graph<T>,
    deformed_sr: Var,
    sr_of_deformed: Var,
    deformed_hr: Var,
    windowing: Windowing,
) -> Result<Var> {
    let t = tssim(g, deformed_sr, sr_of_deformed, deformed_hr, windowing)?;
    let neg = g.scale(t, T::lit(-1.0));
    Ok(g.add_scalar(neg, T::one()))
}

/// Text structure consistency loss. `sr` is `F(Y)` when the caller already
/// has it; otherwise `forward` is run on `lr` as well. The same `spec`
/// deforms all three branches.
pub fn l_tsc<T, F>(
    g: &mut Graph<T>,
    hr: Var,
    lr: Var,
    sr: Option<Var>,
    mut forward: F,
    spec: &DeformationSpec,
    windowing: Windowing,
) -> Result<Var>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let sr = match sr {
        Some(v) => v,
        None => forward(g, lr)?,
    };
    let d_sr = warp::apply_deformation(g, sr, spec)?;
    let d_lr = warp::apply_deformation(g, lr, spec)?;
    let sr_d = forward(g, d_lr)?;
    let d_hr = warp::apply_deformation(g, hr, spec)?;
    tsc_from_parts(g, d_sr, sr_d, d_hr, windowing)
}

/// `l_sr + α·l_tp + β·l_tsc`; absent terms and zero weights are skipped.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_sr: Var,
    l_tp: Option<Var>,
    l_tsc: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total = l_sr;
    for (term, weight) in [(l_tp, w.alpha), (l_tsc, w.beta)] {
        if let Some(t) = term {
            if weight != 0.0 {
                let s = g.scale(t, T::lit(weight));
                total = g.add(total, s)?;
            }
        }
    }
    Ok(total)
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dim(
            "mse",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / x.numel() as f64)
}

/// `10·log10(1/MSE)` in dB; identical images give `+∞`.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

/// SSIM of two plain images, evaluated in 64-bit.
pub fn ssim_value<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, windowing: Windowing) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(x.cast());
    let b = g.constant(y.cast());
    let s = ssim(&mut g, a, b, windowing)?;
    Ok(g.item(s))
}

pub fn tssim_value<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    z: &Tensor<T>,
    windowing: Windowing,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(x.cast());
    let b = g.constant(y.cast());
    let c = g.constant(z.cast());
    let s = tssim(&mut g, a, b, c, windowing)?;
    Ok(g.item(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::finite_diff_gradient;

    fn img(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::from_fn([h, w, 3], |i| {
            let v = (i as u64)
                .wrapping_mul(6364136223846793005)
                .wrapping_add(seed.wrapping_mul(1442695040888963407));
            ((v >> 33) % 1000) as f64 / 999.0
        })
    }

    /// Direct per-window evaluation with plain loops.
    fn oracle_tssim(x: &Tensor<f64>, y: &Tensor<f64>, z: &Tensor<f64>, k: usize) -> f64 {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let lum = |t: &Tensor<f64>, r: usize, c: usize| {
            LUMA[0] * t.at(&[r, c, 0]) + LUMA[1] * t.at(&[r, c, 1]) + LUMA[2] * t.at(&[r, c, 2])
        };
        let mut total = 0.0;
        let mut count = 0;
        for by in 0..h / k {
            for bx in 0..w / k {
                let mut px = Vec::new();
                for r in by * k..(by + 1) * k {
                    for c in bx * k..(bx + 1) * k {
                        px.push([lum(x, r, c), lum(y, r, c), lum(z, r, c)]);
                    }
                }
                let n = px.len() as f64;
                let mu: Vec<f64> = (0..3)
                    .map(|i| px.iter().map(|p| p[i]).sum::<f64>() / n)
                    .collect();
                let cov = |i: usize, j: usize| {
                    px.iter()
                        .map(|p| (p[i] - mu[i]) * (p[j] - mu[j]))
                        .sum::<f64>()
                        / n
                };
                let num = (mu[0] * mu[1] + mu[1] * mu[2] + mu[0] * mu[2] + C1)
                    * (cov(0, 1) + cov(1, 2) + cov(0, 2) + C2);
                let den = (mu[0] * mu[0] + mu[1] * mu[1] + mu[2] * mu[2] + C1)
                    * (cov(0, 0) + cov(1, 1) + cov(2, 2) + C2);
                total += num / den;
                count += 1;
            }
        }
        total / count as f64
    }

    fn oracle_ssim(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let lum: Vec<[f64; 2]> = (0..x.numel() / 3)
            .map(|p| {
                let l =
                    |t: &Tensor<f64>| (0..3).map(|c| LUMA[c] * t.data()[p * 3 + c]).sum::<f64>();
                [l(x), l(y)]
            })
            .collect();
        let n = lum.len() as f64;
        let mx = lum.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = lum.iter().map(|p| p[1]).sum::<f64>() / n;
        let vx = lum.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n;
        let vy = lum.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / n;
        let cxy = lum.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n;
        ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    }

    #[test]
    fn l_sr_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 2, 3]));
        let b = g.constant(Tensor::full([2, 2, 3], 1.0));
        let same = l_sr(&mut g, a, a).unwrap();
        let diff = l_sr(&mut g, a, b).unwrap();
        assert_eq!(g.item(same), 0.0);
        assert_eq!(g.item(diff), 1.0);
    }

    #[test]
    fn l_tp_examples() {
        let mut g = Graph::<f64>::new();
        let target = g.constant(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
        let pred = g.constant(Tensor::from_f64([1, 2], &[0.5, 0.5]).unwrap());
        let same = l_tp(&mut g, target, target).unwrap();
        assert!(g.item(same).abs() < 1e-12);
        let v = l_tp(&mut g, pred, target).unwrap();
        let expected = 0.5 + ((1.0 + PRIOR_EPS).ln() - (0.5 + PRIOR_EPS).ln());
        assert!((g.item(v) - expected).abs() < 1e-12);
        assert!((g.item(v) - (0.5 + 2f64.ln())).abs() < 1e-7);
        let neg = g.constant(Tensor::from_f64([1, 2], &[1.5, -0.5]).unwrap());
        assert!(matches!(l_tp(&mut g, neg, target), Err(Error::Contract(_))));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (x, y) = (img(16, 16, 1), img(16, 16, 2));
        assert!((ssim_value(&x, &x, Windowing::default()).unwrap() - 1.0).abs() < 1e-12);
        let a = ssim_value(&x, &y, Windowing::default()).unwrap();
        let b = ssim_value(&y, &x, Windowing::default()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn ssim_matches_scalar_oracle_on_8x8() {
        let (x, y) = (img(8, 8, 3), img(8, 8, 4));
        let v = ssim_value(&x, &y, Windowing::Window(8)).unwrap();
        assert!((v - oracle_ssim(&x, &y)).abs() < 1e-10);
    }

    #[test]
    fn tssim_matches_scalar_oracle() {
        for s in 0..5 {
            let (x, y, z) = (img(8, 8, s), img(8, 8, s + 10), img(8, 8, s + 20));
            let v = tssim_value(&x, &y, &z, Windowing::Window(8)).unwrap();
            assert!((v - oracle_tssim(&x, &y, &z, 8)).abs() < 1e-10);
        }
        let (x, y, z) = (img(16, 32, 0), img(16, 32, 1), img(16, 32, 2));
        let v = tssim_value(&x, &y, &z, Windowing::Window(8)).unwrap();
        assert!((v - oracle_tssim(&x, &y, &z, 8)).abs() < 1e-10);
    }

    #[test]
    fn tssim_constant_closed_form() {
        let (a, b, c) = (0.2, 0.5, 0.9);
        let t = |v: f64| Tensor::<f64>::full([8, 8, 3], v);
        let v = tssim_value(&t(a), &t(b), &t(c), Windowing::Window(8)).unwrap();
        let expected = (a * b + b * c + a * c + C1) / (a * a + b * b + c * c + C1);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn tssim_permutation_exact() {
        let (x, y, z) = (img(16, 16, 5), img(16, 16, 6), img(16, 16, 7));
        let w = Windowing::default();
        let base = tssim_value(&x, &y, &z, w).unwrap();
        for (p, q, r) in [
            (&x, &z, &y),
            (&y, &x, &z),
            (&y, &z, &x),
            (&z, &x, &y),
            (&z, &y, &x),
        ] {
            assert_eq!(tssim_value(p, q, r, w).unwrap().to_bits(), base.to_bits());
        }
        assert!((tssim_value(&x, &x, &x, w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn windows_must_tile() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(img(10, 16, 0));
        assert!(ssim(&mut g, a, a, Windowing::Window(8)).is_err());
        assert!(ssim(&mut g, a, a, Windowing::Global).is_ok());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::scalar(1.0));
        let p = g.constant(Tensor::scalar(0.5));
        let t = g.constant(Tensor::scalar(0.2));
        let w = LossWeights::default();
        let tot = total_loss(&mut g, s, Some(p), Some(t), &w).unwrap();
        assert!((g.item(tot) - 1.52).abs() < 1e-15);
        assert!((w.combine(1.0, 0.5, 0.2) - 1.52).abs() < 1e-15);
        let off = LossWeights { beta: 0.0, ..w };
        let tot = total_loss(&mut g, s, Some(p), Some(t), &off).unwrap();
        assert_eq!(g.item(tot), 1.5);
    }

    #[test]
    fn psnr_examples() {
        let z = Tensor::<f64>::zeros([4, 4, 3]);
        let o = Tensor::<f64>::full([4, 4, 3], 1.0);
        let t = Tensor::<f64>::full([4, 4, 3], 0.1);
        assert_eq!(psnr(&z, &z).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!((psnr(&z, &t).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn l_sr_gradient_is_scaled_difference() {
        let hr = img(2, 2, 9);
        let sr = img(2, 2, 3);
        let mut g = Graph::<f64>::new();
        let s = g.leaf(sr.clone().with_requires_grad(true));
        let h = g.constant(hr.clone());
        let l = l_sr(&mut g, s, h).unwrap();
        g.backward(l).unwrap();
        let n = sr.numel() as f64;
        for ((gv, a), b) in g.grad(s).unwrap().iter().zip(sr.data()).zip(hr.data()) {
            assert!((gv - 2.0 * (a - b) / n).abs() < 1e-14);
        }
        let numeric = finite_diff_gradient(
            |t: &Tensor<f64>| {
                let mut g = Graph::new();
                let a = g.constant(t.clone());
                let b = g.constant(hr.clone());
                let l = l_sr(&mut g, a, b).unwrap();
                g.item(l)
            },
            &sr,
            1e-5,
        );
        assert!(crate::graph::relative_error(g.grad(s).unwrap(), numeric.data(), 1e-8) < 1e-6);
    }

    fn nearest_up(g: &mut Graph<f64>, v: Var) -> Result<Var> {
        let s = g.shape(v).to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        let idx: Vec<usize> = (0..4 * h * w * c)
            .map(|o| {
                let (p, ch) = (o / c, o % c);
                let (y, x) = (p / (2 * w), p % (2 * w));
                ((y / 2) * w + x / 2) * c + ch
            })
            .collect();
        g.gather(v, std::sync::Arc::new(idx), vec![2 * h, 2 * w, c])
    }

    #[test]
    fn identity_deformation_with_exact_upscaler_gives_zero_tsc() {
        let lr = img(8, 16, 4);
        let mut g = Graph::<f64>::new();
        let y = g.constant(lr.clone());
        let up = nearest_up(&mut g, y).unwrap();
        let hr = g.value(up).clone();
        assert!(
            crate::synth::degrade::box_downsample(&hr, 2)
                .unwrap()
                .max_abs_diff(&lr)
                < 1e-15
        );
        let x = g.constant(hr);
        let l = l_tsc(
            &mut g,
            x,
            y,
            None,
            nearest_up,
            &DeformationSpec::IDENTITY,
            Windowing::Window(8),
        )
        .unwrap();
        assert!(g.item(l).abs() < 1e-12);
        let spec = DeformationSpec::new(4.0, 0.1, 1.3).unwrap();
        let l = l_tsc(&mut g, x, y, None, nearest_up, &spec, Windowing::Window(8)).unwrap();
        assert!((0.0..2.0).contains(&g.item(l)));
    }
}
