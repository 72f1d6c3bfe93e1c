//! Adam, the learning-rate schedule, checkpoints and the training loop.

mod adam;
mod checkpoint;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use schedule::lr_schedule;
pub use trainer::{predict_scores, Evaluation, LogRow, StepLog, Trainer};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub decay_factor: f64,
    pub decay_every_samples: u64,
    pub lr_staircase: bool,
    /// Weight of `‖W_classifier‖²` in the loss.
    pub l2_classifier: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub seed: u64,
    /// Evaluation period in steps; once per epoch when unset.
    pub eval_every: Option<u64>,
    pub max_frames: usize,
    pub kd: LossConfig,
    /// Training is single-threaded and always reproducible; the flag is
    /// recorded for the run log.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.0002,
            batch_size: 160,
            decay_factor: 0.8,
            decay_every_samples: 2_000_000,
            lr_staircase: false,
            l2_classifier: 1e-5,
            epochs: 5,
            steps: None,
            seed: 0,
            eval_every: None,
            max_frames: 300,
            kd: LossConfig::default(),
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and ≥ 0", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} not in (0, 1]", self.decay_factor));
        }
        if self.batch_size == 0 || self.decay_every_samples == 0 || self.max_frames == 0 {
            return bad("batch_size, decay_every_samples and max_frames must be ≥ 1".into());
        }
        if !(self.l2_classifier >= 0.0) {
            return bad(format!("l2_classifier {} must be ≥ 0", self.l2_classifier));
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be ≥ 1".into());
        }
        self.kd.validate()
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.steps.unwrap_or(self.epochs as u64 * self.steps_per_epoch(dataset_len))
    }
}
