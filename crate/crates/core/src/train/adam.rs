//! Bias-corrected Adam over a [`ParamStore`], in sorted parameter order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &[T], b: &[T]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        };
        self.step == other.step
            && self.moments.len() == other.moments.len()
            && self
                .moments
                .iter()
                .zip(&other.moments)
                .all(|((ka, (ma, va)), (kb, (mb, vb)))| ka == kb && same(ma, mb) && same(va, vb))
    }
}

/// One update of every trainable parameter from its stored gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        if p.trainable && p.tensor.grad().is_none() {
            return Err(Error::Contract(format!("missing gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one, lr, eps) = (T::one(), T::lit(cfg.lr), T::lit(cfg.eps));
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let n = p.tensor.numel();
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let data = p.tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
