//! The joint training loop.
//!
//! One global ChaCha8 stream drives every random choice. Per step the draw
//! order is: `batch` sample indices, then one deformation (three draws) per
//! batch entry. Deformations are drawn even when the consistency term is
//! off, so runs with `β = 0` and runs without the term stay in lockstep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, RngState};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses;
use crate::network::{self, NetworkConfig};
use crate::nn::{ParamStore, Params};
use crate::synth::corpus::{Corpus, GlyphSample, Split};
use crate::synth::warp::DeformationSpec;
use crate::tensor::{Scalar, Tensor};

/// Stream id of the training RNG, distinct from parameter initialization.
const TRAIN_STREAM: u64 = 1;
const FIXED_DEFORM_SALT: u64 = 0x5dee_ce66_d1ce_4e5b;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_sr: f64,
    pub l_tp: f64,
    pub l_tsc: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: u64,
    pub val_l_sr: f64,
    pub val_psnr: f64,
}

pub struct TrainState<T> {
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Network parameters from `seed`; the prior generator is overwritten by
/// `pretrained` when given, and a frozen copy of it is kept under
/// `recognizer/` for evaluation.
pub fn init_joint_params<T: Scalar>(
    network: &NetworkConfig,
    seed: u64,
    pretrained: Option<&ParamStore<T>>,
) -> Result<ParamStore<T>> {
    let mut store = network.init_params::<T>(seed)?;
    if let Some(pre) = pretrained {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("tpg/"))
            .map(String::from)
            .collect();
        for name in names {
            let src = pre.tensor(&name)?;
            let dst = store.tensor_mut(&name)?;
            if src.shape() != dst.shape() {
                return Err(Error::dim(
                    "init_joint_params",
                    format!(
                        "{name}: pretrained {:?} vs network {:?}",
                        src.shape(),
                        dst.shape()
                    ),
                ));
            }
            let mut t = src.clone();
            t.clear_grad();
            *dst = t;
        }
    }
    store.copy_prefix("tpg/", "recognizer/", false);
    Ok(store)
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        train: TrainConfig,
        network: NetworkConfig,
        mut params: ParamStore<T>,
    ) -> Result<Self> {
        train.validate()?;
        network.validate()?;
        if train.freeze_tpg {
            params.set_trainable("tpg/", false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            train,
            network,
            params,
            adam: AdamState::new(),
            step: 0,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut params = self.params.clone();
        for (_, p) in params.iter_mut() {
            p.tensor.clear_grad();
        }
        Checkpoint {
            train: self.train.clone(),
            network: self.network.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            params,
            adam: self.adam.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint<T>) -> Self {
        Self {
            rng: c.rng.restore(),
            train: c.train,
            network: c.network,
            params: c.params,
            adam: c.adam,
            step: c.step,
        }
    }
}

/// Prior of the HR image under the current generator weights, as a
/// detached tensor.
pub fn hr_prior_target<T: Scalar>(
    params: &ParamStore<T>,
    net: &NetworkConfig,
    hr: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut p = Params::new(params);
    let x = g.constant(hr.clone());
    let (_, prior) = network::text_prior_from_hr(&mut g, &mut p, net, "tpg", x)?;
    Ok(g.value(prior).clone())
}

/// The deformation for one batch entry, given the draw from the global
/// stream.
fn deformation_for(
    train: &TrainConfig,
    sample: &GlyphSample,
    drawn: DeformationSpec,
) -> DeformationSpec {
    if train.fixed_deform {
        DeformationSpec::sample(&mut ChaCha8Rng::seed_from_u64(
            sample.seed ^ FIXED_DEFORM_SALT,
        ))
    } else {
        drawn
    }
}

/// Graph handles of every loss term for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_sr: Var,
    pub l_tp: Option<Var>,
    pub l_tsc: Option<Var>,
    pub total: Var,
}

/// Joint loss of one `(lr, hr)` pair. `target` is the detached HR prior;
/// the prior term is skipped without it. The consistency term runs when
/// `train.tsc` is set and its weight is positive.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Params<T>,
    net: &NetworkConfig,
    train: &TrainConfig,
    lr: Var,
    hr: Var,
    target: Option<Tensor<T>>,
    spec: &DeformationSpec,
) -> Result<LossParts> {
    let w = &train.weights;
    let out = network::reconstruct_sr(g, p, net, lr)?;
    let l_sr = losses::l_sr(g, out.sr, hr)?;
    let l_tp = match (out.prior, target) {
        (Some(prior), Some(t)) => {
            let t = g.constant(t);
            Some(losses::l_tp(g, prior, t)?)
        }
        _ => None,
    };
    let l_tsc = if train.tsc && w.beta > 0.0 {
        let forward = |g: &mut Graph<T>, v| network::reconstruct_sr(g, p, net, v).map(|o| o.sr);
        Some(losses::l_tsc(
            g,
            hr,
            lr,
            Some(out.sr),
            forward,
            spec,
            train.windowing,
        )?)
    } else {
        None
    };
    let total = losses::total_loss(g, l_sr, l_tp, l_tsc, w)?;
    Ok(LossParts {
        l_sr,
        l_tp,
        l_tsc,
        total,
    })
}

struct SampleLoss<T> {
    l_sr: f64,
    l_tp: f64,
    l_tsc: f64,
    total: f64,
    grads: Vec<(String, Vec<T>)>,
}

fn sample_loss<T: Scalar>(
    params: &ParamStore<T>,
    net: &NetworkConfig,
    train: &TrainConfig,
    sample: &GlyphSample,
    spec: &DeformationSpec,
    scale: f64,
) -> Result<SampleLoss<T>> {
    let hr_t = sample.hr.cast::<T>();
    let target = if net.tp_branch && train.weights.alpha > 0.0 {
        Some(hr_prior_target(params, net, &hr_t)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let mut p = Params::new(params);
    let lr = g.constant(sample.lr.cast());
    let hr = g.constant(hr_t);
    let parts = joint_loss(&mut g, &mut p, net, train, lr, hr, target, spec)?;
    let item = |g: &Graph<T>, v: Option<Var>| v.map(|v| g.item(v).as_f64()).unwrap_or(0.0);
    let rec = (
        g.item(parts.l_sr).as_f64(),
        item(&g, parts.l_tp),
        item(&g, parts.l_tsc),
        g.item(parts.total).as_f64(),
    );
    let scaled = g.scale(parts.total, T::lit(scale));
    g.backward(scaled)?;
    Ok(SampleLoss {
        l_sr: rec.0,
        l_tp: rec.1,
        l_tsc: rec.2,
        total: rec.3,
        grads: p.grads(&g),
    })
}

/// One optimizer step over a batch drawn from `train_idx`.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    corpus: &Corpus,
    train_idx: &[usize],
) -> Result<StepRecord> {
    if train_idx.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let b = state.train.batch;
    let batch: Vec<usize> = (0..b)
        .map(|_| train_idx[state.rng.gen_range(0..train_idx.len())])
        .collect();
    let drawn: Vec<DeformationSpec> = (0..b)
        .map(|_| DeformationSpec::sample(&mut state.rng))
        .collect();
    state.params.zero_grad();
    let mut sums = [0.0; 4];
    for (&i, &d) in batch.iter().zip(&drawn) {
        let sample = &corpus.samples[i];
        let spec = deformation_for(&state.train, sample, d);
        let s = sample_loss(
            &state.params,
            &state.network,
            &state.train,
            sample,
            &spec,
            1.0 / b as f64,
        )?;
        if !s.total.is_finite() {
            return Err(Error::NonFinite {
                step: state.step,
                batch: batch.clone(),
            });
        }
        state.params.accumulate(s.grads)?;
        for (acc, v) in sums.iter_mut().zip([s.l_sr, s.l_tp, s.l_tsc, s.total]) {
            *acc += v;
        }
    }
    adam_step(&mut state.params, &mut state.adam, &state.train.adam())?;
    state.step += 1;
    let n = b as f64;
    Ok(StepRecord {
        step: state.step,
        l_sr: sums[0] / n,
        l_tp: sums[1] / n,
        l_tsc: sums[2] / n,
        total: sums[3] / n,
    })
}

/// Mean SR loss and PSNR over the first `val_samples` validation samples.
pub fn validate<T: Scalar>(state: &TrainState<T>, corpus: &Corpus) -> Result<Option<ValRecord>> {
    let idx: Vec<usize> = corpus
        .indices(Split::Val)
        .into_iter()
        .take(state.train.val_samples)
        .collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let frozen = frozen_copy(&state.params);
    let (mut l, mut p) = (0.0, 0.0);
    for &i in &idx {
        let s = &corpus.samples[i];
        let inf = network::infer(&frozen, &state.network, &s.lr.cast::<T>())?;
        let m = losses::mse(&inf.sr, &s.hr.cast())?;
        l += m;
        p += if m == 0.0 {
            100.0
        } else {
            10.0 * (1.0 / m).log10()
        };
    }
    let n = idx.len() as f64;
    Ok(Some(ValRecord {
        step: state.step,
        val_l_sr: l / n,
        val_psnr: p / n,
    }))
}

/// Same values with every parameter marked frozen, for cheap inference.
pub fn frozen_copy<T: Scalar>(params: &ParamStore<T>) -> ParamStore<T> {
    let mut f = params.clone();
    f.set_trainable("", false);
    f
}

/// Trains until `state.step == until`, calling `on_step` after every step
/// with the step record and, on validation steps, the validation record.
pub fn run<T, F>(
    state: &mut TrainState<T>,
    corpus: &Corpus,
    until: u64,
    mut on_step: F,
) -> Result<()>
where
    T: Scalar,
    F: FnMut(&TrainState<T>, &StepRecord, Option<&ValRecord>) -> Result<()>,
{
    let train_idx = corpus.indices(Split::Train);
    while state.step < until {
        let rec = train_step(state, corpus, &train_idx)?;
        let every = state.train.val_every;
        let val = if every > 0 && state.step % every == 0 {
            validate(state, corpus)?
        } else {
            None
        };
        on_step(state, &rec, val.as_ref())?;
    }
    Ok(())
}
