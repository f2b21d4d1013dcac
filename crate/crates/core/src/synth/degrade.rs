//! HR → LR degradation and the bicubic baseline upsampler.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BLUR_RANGE: (f64, f64) = (0.5, 1.5);
pub const NOISE_RANGE: (f64, f64) = (0.0, 0.03);

/// Blur sigma in HR pixels (0 disables blur) and additive noise sigma.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl DegradeConfig {
    pub const CLEAN: Self = Self {
        blur_sigma: 0.0,
        noise_sigma: 0.0,
        noise_seed: 0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let b: f64 = rng.gen();
        let n: f64 = rng.gen();
        Self {
            blur_sigma: BLUR_RANGE.0 + b * (BLUR_RANGE.1 - BLUR_RANGE.0),
            noise_sigma: NOISE_RANGE.0 + n * (NOISE_RANGE.1 - NOISE_RANGE.0),
            noise_seed: rng.gen(),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Tensor::new([h, w, c], out).expect("shape preserved")
}

/// Mean over non-overlapping `f×f` blocks.
pub fn box_downsample<T: Scalar>(img: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || f == 0 || s[0] % f != 0 || s[1] % f != 0 {
        return Err(Error::dim("box_downsample", format!("{s:?} by {f}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / f, w / f);
    let wt = T::lit(1.0 / (f * f) as f64);
    let src = img.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = T::zero();
                for dy in 0..f {
                    for dx in 0..f {
                        acc = acc + wt * src[((oy * f + dy) * w + ox * f + dx) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc;
            }
        }
    }
    Tensor::new([oh, ow, c], out)
}

/// Blur, 2× box downsample, additive Gaussian noise, clamp to `[0, 1]`.
pub fn degrade_to_lr(hr: &Tensor<f64>, cfg: &DegradeConfig) -> Result<Tensor<f64>> {
    let blurred = gaussian_blur(hr, cfg.blur_sigma);
    let mut lr = box_downsample(&blurred, 2)?;
    if cfg.noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Contract(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        for v in lr.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(lr.map(|v| v.clamp(0.0, 1.0)))
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(out: usize, scale: usize, n: usize) -> [(usize, f64); 4] {
    let src = (out as f64 + 0.5) / scale as f64 - 0.5;
    let base = src.floor();
    let mut taps = [(0, 0.0); 4];
    for (k, tap) in taps.iter_mut().enumerate() {
        let i = base + k as f64 - 1.0;
        *tap = (i.clamp(0.0, (n - 1) as f64) as usize, cubic_weight(src - i));
    }
    taps
}

/// Keys bicubic interpolation (a = −0.5) by an integer factor, pixel-centre
/// aligned, replicated borders, clamped to `[0, 1]`.
pub fn bicubic_upsample<T: Scalar>(img: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || scale == 0 {
        return Err(Error::dim("bicubic_upsample", format!("{s:?} by {scale}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (oh, ow) = (h * scale, w * scale);
    let xt: Vec<_> = (0..ow).map(|x| cubic_taps(x, scale, w)).collect();
    let src = img.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        let yt = cubic_taps(oy, scale, h);
        for (ox, xtaps) in xt.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(yy, wy) in &yt {
                    for &(xx, wx) in xtaps {
                        acc += wy * wx * src[(yy * w + xx) * c + ch].as_f64();
                    }
                }
                out[(oy * ow + ox) * c + ch] = T::lit(acc.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([oh, ow, c], out)
}
