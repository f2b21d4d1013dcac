//! The deformation operator: a centre-anchored affine warp
//! (rotation ∘ shear ∘ aspect) with bilinear sampling and replicate border.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, SparseMap, Var};
use crate::tensor::{Scalar, Tensor};

pub const ROTATION_RANGE: (f64, f64) = (-10.0, 10.0);
pub const SHEAR_RANGE: (f64, f64) = (-0.3, 0.3);
pub const ASPECT_RANGE: (f64, f64) = (0.5, 2.0);

/// Rotation in degrees, horizontal shear, and a width scale factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationSpec {
    pub rotation: f64,
    pub shear: f64,
    pub aspect: f64,
}

impl Default for DeformationSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v.is_finite() && v >= lo && v <= hi
}

impl DeformationSpec {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        shear: 0.0,
        aspect: 1.0,
    };

    pub fn new(rotation: f64, shear: f64, aspect: f64) -> Result<Self> {
        let s = Self {
            rotation,
            shear,
            aspect,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if within(self.rotation, ROTATION_RANGE)
            && within(self.shear, SHEAR_RANGE)
            && within(self.aspect, ASPECT_RANGE)
        {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "deformation out of range: {self:?}"
            )))
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Uniform rotation and shear, log-uniform aspect over the full ranges.
    /// Always consumes exactly three draws.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self::sample_within(rng, ROTATION_RANGE, SHEAR_RANGE, ASPECT_RANGE)
    }

    pub fn sample_within<R: Rng>(
        rng: &mut R,
        rot: (f64, f64),
        shear: (f64, f64),
        aspect: (f64, f64),
    ) -> Self {
        let r: f64 = rng.gen();
        let s: f64 = rng.gen();
        let a: f64 = rng.gen();
        let (la, ha) = (aspect.0.ln(), aspect.1.ln());
        Self {
            rotation: rot.0 + r * (rot.1 - rot.0),
            shear: shear.0 + s * (shear.1 - shear.0),
            aspect: (la + a * (ha - la)).exp().clamp(aspect.0, aspect.1),
        }
    }

    /// Forward matrix `R·S·A` acting on centred `(x, y)` coordinates.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let rs = [[c, c * self.shear - s], [s, s * self.shear + c]];
        [
            [rs[0][0] * self.aspect, rs[0][1]],
            [rs[1][0] * self.aspect, rs[1][1]],
        ]
    }

    pub fn inverse_matrix(&self) -> [[f64; 2]; 2] {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ]
    }

    /// Where a point given in pixel coordinates of an `h×w` image lands.
    pub fn map_point(&self, h: usize, w: usize, x: f64, y: f64) -> (f64, f64) {
        let m = self.matrix();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (u, v) = (x - cx, y - cy);
        (
            m[0][0] * u + m[0][1] * v + cx,
            m[1][0] * u + m[1][1] * v + cy,
        )
    }
}

/// Sparse resampling operator for an `h×w×c` image. Each output pixel
/// centre is pulled back through the inverse transform and sampled
/// bilinearly with clamped (replicated) borders.
pub fn warp_map<T: Scalar>(h: usize, w: usize, c: usize, spec: &DeformationSpec) -> SparseMap<T> {
    let n = h * w * c;
    if spec.is_identity() {
        return SparseMap::from_rows(n, (0..n).map(|i| vec![(i, T::one())]));
    }
    let inv = spec.inverse_matrix();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut rows = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = inv[0][0] * u + inv[0][1] * v + cx - 0.5;
            let sy = inv[1][0] * u + inv[1][1] * v + cy - 0.5;
            let taps = bilinear_taps(sx, sy, h, w);
            for ch in 0..c {
                let mut row: Vec<(usize, T)> = Vec::with_capacity(4);
                for &(py, px, wt) in &taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let idx = (py * w + px) * c + ch;
                    match row.iter_mut().find(|(j, _)| *j == idx) {
                        Some(e) => e.1 = e.1 + T::lit(wt),
                        None => row.push((idx, T::lit(wt))),
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap::from_rows(n, rows)
}

fn bilinear_taps(sx: f64, sy: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let cl = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
    let (xa, xb) = (cl(x0, w), cl(x0 + 1.0, w));
    let (ya, yb) = (cl(y0, h), cl(y0 + 1.0, h));
    [
        (ya, xa, (1.0 - fx) * (1.0 - fy)),
        (ya, xb, fx * (1.0 - fy)),
        (yb, xa, (1.0 - fx) * fy),
        (yb, xb, fx * fy),
    ]
}

/// Differentiable warp of an `h×w×c` graph image.
pub fn apply_deformation<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &DeformationSpec,
) -> Result<Var> {
    spec.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(
            "apply_deformation",
            format!("{s:?} is not h×w×c"),
        ));
    }
    if spec.is_identity() {
        return Ok(x);
    }
    let map = warp_map::<T>(s[0], s[1], s[2], spec);
    g.sparse(x, Arc::new(map), s)
}

/// Warp of a plain tensor.
pub fn deform_image<T: Scalar>(img: &Tensor<T>, spec: &DeformationSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::dim("deform_image", format!("{s:?} is not h×w×c")));
    }
    if spec.is_identity() {
        return Ok(img.clone());
    }
    Tensor::new(
        s.to_vec(),
        warp_map::<T>(s[0], s[1], s[2], spec).apply(img.data()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([h, w, 3], |i| {
            let p = i / 3;
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            0.5 + 0.4 * (x * 0.21).sin() * (y * 0.33).cos()
        })
    }

    fn interior_mad(a: &Tensor<f64>, b: &Tensor<f64>, margin: usize) -> f64 {
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut s = 0.0;
        let mut n = 0;
        for y in margin..h - margin {
            for x in margin..w - margin {
                for ch in 0..c {
                    s += (a.at(&[y, x, ch]) - b.at(&[y, x, ch])).abs();
                    n += 1;
                }
            }
        }
        s / n as f64
    }

    #[test]
    fn identity_is_exact() {
        let img = pattern(8, 12);
        let out = deform_image(&img, &DeformationSpec::IDENTITY).unwrap();
        assert!(out.bit_eq(&img));
        let map = warp_map::<f64>(8, 12, 3, &DeformationSpec::IDENTITY);
        assert_eq!(map.apply(img.data()), img.data());
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(DeformationSpec::new(11.0, 0.0, 1.0).is_err());
        assert!(DeformationSpec::new(0.0, 0.31, 1.0).is_err());
        assert!(DeformationSpec::new(0.0, 0.0, 2.5).is_err());
        assert!(DeformationSpec::new(-10.0, 0.3, 0.5).is_ok());
    }

    #[test]
    fn rotation_round_trip_interior() {
        let img = pattern(32, 128);
        for theta in [3.0, -7.5, 10.0] {
            let fwd = deform_image(&img, &DeformationSpec::new(theta, 0.0, 1.0).unwrap()).unwrap();
            let back =
                deform_image(&fwd, &DeformationSpec::new(-theta, 0.0, 1.0).unwrap()).unwrap();
            assert!(interior_mad(&img, &back, 8) < 0.02, "theta {theta}");
        }
    }

    #[test]
    fn sampled_specs_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            DeformationSpec::sample(&mut rng).validate().unwrap();
        }
    }

    #[test]
    fn warp_rows_are_convex_combinations() {
        let spec = DeformationSpec::new(7.0, -0.2, 1.6).unwrap();
        let map = warp_map::<f64>(16, 64, 1, &spec);
        let ones = map.apply(&vec![1.0; 16 * 64]);
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn map_point_fixes_centre() {
        let spec = DeformationSpec::new(9.0, 0.25, 0.7).unwrap();
        let (x, y) = spec.map_point(32, 128, 64.0, 16.0);
        assert!((x - 64.0).abs() < 1e-12 && (y - 16.0).abs() < 1e-12);
    }
}
