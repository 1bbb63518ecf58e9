//! Optimization, model selection and the ablation ladder.

mod ablation;
mod adam;
mod engine;
mod eval;
mod schedule;

pub use ablation::{ablation_csv, ablation_suite, model_for_mode, AblationMode, AblationRow, ABLATION_HEADER};
pub use adam::Adam;
pub use engine::{batch_loss, mean_loss, train, EpochRecord, TrainOutcome, TrainState, HISTORY_HEADER};
pub use eval::{evaluate, Evaluation};
pub use schedule::{lr_at, warmup_steps};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Warmup length as a fraction of all optimizer steps.
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Also freeze the decoder and fusion projection.
    pub freeze_decoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            peak_lr: 1e-4,
            warmup_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            ablation_mode: AblationMode::E,
            augment: true,
            augmentation: AugmentConfig::default(),
            freeze_decoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}
