//! Raw loops behind the graph ops. Everything here works on flat row-major
//! slices and accumulates into its output (`+=`), so callers zero buffers.

use crate::tensor::Scalar;

/// Dot product with eight independent partial sums so the loop vectorizes
/// without reassociation flags. Summation order is fixed, so results are
/// reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if n < 32 {
        let mut bt = vec![T::zero(); n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        gemm_nn(a, &bt, c, m, n, k);
        return;
    }
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] = c[i * k + p] + dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(av, brow, &mut c[p * n..(p + 1) * n]);
        }
    }
}

/// Geometry of a stride-1 2-D cross-correlation over an `h×w×cin` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds patches into rows of length `kh·kw·cin`, matching the kernel's
/// `[kh, kw, cin, cout]` layout viewed as `(kh·kw·cin) × cout`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.out_pixels() * patch];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = oy as isize + ky as isize - g.pad_h as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = ox as isize + kx as isize - g.pad_w as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = oy as isize + ky as isize - g.pad_h as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = ox as isize + kx as isize - g.pad_w as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] = dx[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
}

/// Layout of a batch of sequences `[sequences × steps × width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanGeom {
    pub sequences: usize,
    pub steps: usize,
    pub width: usize,
    pub reverse: bool,
}

impl ScanGeom {
    fn order(&self) -> impl Iterator<Item = usize> {
        let steps = self.steps;
        let rev = self.reverse;
        (0..steps).map(move |i| if rev { steps - 1 - i } else { i })
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Saved activations of a gated scan, needed by its backward pass.
#[derive(Clone, Debug)]
pub struct ScanTrace<T> {
    pub gate: Vec<T>,
    pub candidate: Vec<T>,
}

/// Minimal gated recurrence, starting from a zero state:
///
/// ```text
/// z_t  = σ(az_t + h_{t-1} U_z)
/// ĥ_t  = tanh(ah_t + h_{t-1} U_h)
/// h_t  = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ ĥ_t
/// ```
///
/// `az`/`ah` are the input projections (bias included).
pub fn scan_forward<T: Scalar>(
    az: &[T],
    ah: &[T],
    uz: &[T],
    uh: &[T],
    g: &ScanGeom,
) -> (Vec<T>, ScanTrace<T>) {
    let c = g.width;
    let total = g.sequences * g.steps * c;
    let mut out = vec![T::zero(); total];
    let mut gate = vec![T::zero(); total];
    let mut cand = vec![T::zero(); total];
    let mut h = vec![T::zero(); c];
    let mut pz = vec![T::zero(); c];
    let mut ph = vec![T::zero(); c];
    for s in 0..g.sequences {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in g.order() {
            let o = (s * g.steps + t) * c;
            pz.copy_from_slice(&az[o..o + c]);
            ph.copy_from_slice(&ah[o..o + c]);
            for (i, &hv) in h.iter().enumerate() {
                if hv == T::zero() {
                    continue;
                }
                axpy(hv, &uz[i * c..(i + 1) * c], &mut pz);
                axpy(hv, &uh[i * c..(i + 1) * c], &mut ph);
            }
            for j in 0..c {
                let z = sigmoid(pz[j]);
                let ht = ph[j].tanh();
                gate[o + j] = z;
                cand[o + j] = ht;
                h[j] = (T::one() - z) * h[j] + z * ht;
            }
            out[o..o + c].copy_from_slice(&h);
        }
    }
    (
        out,
        ScanTrace {
            gate,
            candidate: cand,
        },
    )
}

/// Gradients of [`scan_forward`] with respect to `az`, `ah`, `U_z`, `U_h`.
pub struct ScanGrads<T> {
    pub az: Vec<T>,
    pub ah: Vec<T>,
    pub uz: Vec<T>,
    pub uh: Vec<T>,
}

pub fn scan_backward<T: Scalar>(
    out: &[T],
    trace: &ScanTrace<T>,
    uz: &[T],
    uh: &[T],
    dout: &[T],
    g: &ScanGeom,
) -> ScanGrads<T> {
    let c = g.width;
    let total = g.sequences * g.steps * c;
    let mut d_az = vec![T::zero(); total];
    let mut d_ah = vec![T::zero(); total];
    let mut d_uz = vec![T::zero(); c * c];
    let mut d_uh = vec![T::zero(); c * c];
    let zero = vec![T::zero(); c];
    let mut dh = vec![T::zero(); c];
    let mut dprev = vec![T::zero(); c];
    let order: Vec<usize> = g.order().collect();
    for s in 0..g.sequences {
        dh.iter_mut().for_each(|v| *v = T::zero());
        for (pos, &t) in order.iter().enumerate().rev() {
            let o = (s * g.steps + t) * c;
            let prev: &[T] = if pos == 0 {
                &zero
            } else {
                let pt = order[pos - 1];
                let po = (s * g.steps + pt) * c;
                &out[po..po + c]
            };
            for j in 0..c {
                let total_dh = dh[j] + dout[o + j];
                let z = trace.gate[o + j];
                let ht = trace.candidate[o + j];
                let dz = total_dh * (ht - prev[j]);
                let dht = total_dh * z;
                dprev[j] = total_dh * (T::one() - z);
                d_az[o + j] = dz * z * (T::one() - z);
                d_ah[o + j] = dht * (T::one() - ht * ht);
            }
            let dpz = &d_az[o..o + c];
            let dph = &d_ah[o..o + c];
            for (i, &hv) in prev.iter().enumerate() {
                if hv != T::zero() {
                    axpy(hv, dpz, &mut d_uz[i * c..(i + 1) * c]);
                    axpy(hv, dph, &mut d_uh[i * c..(i + 1) * c]);
                }
                dprev[i] = dprev[i]
                    + dot(&uz[i * c..(i + 1) * c], dpz)
                    + dot(&uh[i * c..(i + 1) * c], dph);
            }
            std::mem::swap(&mut dh, &mut dprev);
        }
    }
    ScanGrads {
        az: d_az,
        ah: d_ah,
        uz: d_uz,
        uh: d_uh,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a·bᵀ where b is viewed as n×k: reuse c (m×n) and b (k×n) → m×k
        let mut d = vec![0.0; m * k];
        gemm_nt(&c, &b, &mut d, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((d[i * k + p] - want).abs() < 1e-12);
            }
        }
        let mut e = vec![0.0; k * n];
        gemm_tn(&a, &c, &mut e, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((e[p * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = ConvGeom {
            h: 4,
            w: 5,
            cin: 2,
            cout: 1,
            kh: 3,
            kw: 3,
            pad_h: 1,
            pad_w: 1,
            out_h: 4,
            out_w: 5,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
