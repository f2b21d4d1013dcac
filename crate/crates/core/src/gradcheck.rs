//! Central finite-difference checks of analytic gradients, for single ops
//! and for the whole network loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{finite_diff_gradient, relative_error, Graph, Var};
use crate::network::NetworkConfig;
use crate::nn::{ParamStore, Params};
use crate::synth::warp::DeformationSpec;
use crate::tensor::Tensor;
use crate::train::trainer::{hr_prior_target, joint_loss};
use crate::train::TrainConfig;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradient components near
/// zero are compared absolutely.
pub const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Checks `op` at `x`. The op output is contracted with a fixed random
/// tensor so every output element contributes to the scalar.
pub fn check_op<F>(op: F, x: &Tensor<f64>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |g: &mut Graph<f64>, xv: Var, probe: &mut Option<Tensor<f64>>| -> Result<Var> {
        let y = op(g, xv)?;
        let shape = g.shape(y).to_vec();
        let r = probe.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_tensor(&shape, -1.0, 1.0, &mut rng)
        });
        let r = g.constant(r.clone());
        let m = g.mul(y, r)?;
        Ok(g.sum(m))
    };
    let mut probe = None;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let loss = eval(&mut g, xv, &mut probe)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut failure = None;
    let numeric = finite_diff_gradient(
        |t| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            match eval(&mut g, v, &mut probe) {
                Ok(l) => g.item(l),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        x,
        STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, numeric.data(), FLOOR))
}

/// Inputs and settings for a whole-network check.
pub struct NetworkCase {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub params: ParamStore<f64>,
    pub lr: Tensor<f64>,
    pub hr: Tensor<f64>,
    pub spec: DeformationSpec,
}

impl NetworkCase {
    /// Random images and parameters at `net`'s geometry, with every loss
    /// term switched on and a non-trivial deformation.
    pub fn random(net: NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = net.init_params::<f64>(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        // the initial arrangement has exact zeros that would hide whole
        // branches from the check
        for (_, p) in params.iter_mut() {
            for v in p.tensor.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let lr = random_tensor(&[net.lr_height, net.lr_width, 3], 0.0, 1.0, &mut rng);
        let hr = random_tensor(&[net.hr_height(), net.hr_width(), 3], 0.0, 1.0, &mut rng);
        let spec = DeformationSpec::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(0.6..1.6),
        )?;
        let mut train = TrainConfig::default();
        train.weights.beta = 0.5;
        train.precision = crate::tensor::Precision::F64;
        Ok(Self {
            net,
            train,
            params,
            lr,
            hr,
            spec,
        })
    }

    fn loss(
        &self,
        params: &ParamStore<f64>,
        target: &Option<Tensor<f64>>,
        grads: bool,
    ) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
        let mut g = Graph::new();
        let mut p = Params::new(params);
        let lr = g.constant(self.lr.clone());
        let hr = g.constant(self.hr.clone());
        let parts = joint_loss(
            &mut g,
            &mut p,
            &self.net,
            &self.train,
            lr,
            hr,
            target.clone(),
            &self.spec,
        )?;
        let value = g.item(parts.total);
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(parts.total)?;
        Ok((value, p.grads(&g)))
    }

    /// Per-parameter report; at most `per_param` entries of each tensor are
    /// probed, chosen at random.
    pub fn check(&self, per_param: usize, seed: u64) -> Result<Vec<GradReport>> {
        let target = if self.net.tp_branch {
            Some(hr_prior_target(&self.params, &self.net, &self.hr)?)
        } else {
            None
        };
        let (_, grads) = self.loss(&self.params, &target, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reports = Vec::new();
        for (name, analytic) in grads {
            let n = analytic.len();
            let picks: Vec<usize> = if n <= per_param {
                (0..n).collect()
            } else {
                rand::seq::index::sample(&mut rng, n, per_param).into_vec()
            };
            let mut a = Vec::with_capacity(picks.len());
            let mut num = Vec::with_capacity(picks.len());
            let mut probe = self.params.clone();
            for &i in &picks {
                let orig = probe.tensor(&name)?.data()[i];
                probe.tensor_mut(&name)?.data_mut()[i] = orig + STEP;
                let up = self.loss(&probe, &target, false)?.0;
                probe.tensor_mut(&name)?.data_mut()[i] = orig - STEP;
                let down = self.loss(&probe, &target, false)?.0;
                probe.tensor_mut(&name)?.data_mut()[i] = orig;
                a.push(analytic[i]);
                num.push((up - down) / (2.0 * STEP));
            }
            reports.push(GradReport {
                max_rel_error: relative_error(&a, &num, FLOOR),
                checked: picks.len(),
                name,
            });
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_gradient_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[3, 4], -2.0, 2.0, &mut rng);
        let err = check_op(|g, v| Ok(g.tanh(v)), &x, 2).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_f64([2], &[0.5, 1.5]).unwrap();
        // detach hides the dependence from the tape, so the analytic
        // gradient is zero while the numeric one is not
        let err = check_op(|g, v| Ok(g.detach(v)), &x, 3).unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn mini_network_gradients_pass() {
        let case = NetworkCase::random(NetworkConfig::mini(), 5).unwrap();
        let reports = case.check(6, 1).unwrap();
        let worst = reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .unwrap();
        assert!(worst.max_rel_error < 1e-4, "{worst:?}");
    }
}
