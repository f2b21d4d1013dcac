//! Optimizer, training loop, checkpoints, evaluation and recognizer
//! pretraining.

pub mod adam;
pub mod checkpoint;
pub mod eval;
pub mod pretrain;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::losses::{LossWeights, Windowing};
use crate::tensor::Precision;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint_any, AnyCheckpoint, Checkpoint, RngState};
pub use eval::{evaluate, EvalReport};
pub use pretrain::{pretrain_tpg, PretrainConfig, PretrainReport};
pub use trainer::{
    init_joint_params, joint_loss, run, train_step, LossParts, StepRecord, TrainState, ValRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub weights: LossWeights,
    pub seed: u64,
    pub precision: Precision,
    /// Computes the consistency term when `weights.beta > 0`.
    pub tsc: bool,
    pub freeze_tpg: bool,
    /// Deformation per sample fixed by its seed instead of redrawn per step.
    pub fixed_deform: bool,
    pub windowing: Windowing,
    /// Validation cadence in steps; 0 disables.
    pub val_every: u64,
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            steps: 2000,
            weights: LossWeights::default(),
            seed: 7,
            precision: Precision::F32,
            tsc: true,
            freeze_tpg: false,
            fixed_deform: false,
            windowing: Windowing::default(),
            val_every: 200,
            val_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(crate::Error::Contract(format!(
                "learning rate {} and batch {} must be positive",
                self.lr, self.batch
            )));
        }
        Ok(())
    }
}
