use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lr_at, Adam, TrainConfig};
use crate::autodiff::Tape;
use crate::data::augment::augment_with;
use crate::data::{batch_images, batch_labels, Sample};
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::params::ParamStore;

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses seen during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: Adam<f32>,
    pub best_val_loss: f64,
    pub best_checkpoint: Option<PathBuf>,
    /// Seed of the stream driving the current epoch's shuffle and augmentation.
    pub epoch_seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, before its update.
    pub step_losses: Vec<f64>,
    /// Sample ids of each step's batch, aligned with `step_losses`.
    pub step_batches: Vec<Vec<String>>,
    pub best_step: usize,
    /// Parameter values at the lowest validation loss.
    pub best_params: ParamStore<f32>,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    s
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Dice + cross-entropy of one batch, without gradient bookkeeping beyond the tape.
pub fn batch_loss(model: &SegModel<f32>, batch: &[&Sample]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch_images(batch)?)?;
    let logits = model.forward(&mut tape, x)?;
    let loss = tape.dice_ce_loss(logits, &batch_labels(batch))?;
    Ok(tape.value(loss).data()[0] as f64)
}

/// Sample-weighted mean loss over `samples` in batches of `batch_size`.
pub fn mean_loss(model: &SegModel<f32>, samples: &[&Sample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        total += batch_loss(model, chunk)? * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn non_finite(err: Error, epoch: usize, step: usize, batch: &[Sample]) -> Error {
    match err {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            epoch,
            step,
            batch_ids: batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(" "),
        },
        other => other,
    }
}

fn save_checkpoint(model: &SegModel<f32>, out: &Path, step: usize) -> Result<PathBuf> {
    let rel = PathBuf::from("checkpoints").join(step.to_string());
    let dir = out.join(&rel);
    model.params.save_dir(&dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&model.config)?)?;
    fs::write(out.join("best"), format!("{}\n", rel.display()))?;
    Ok(dir)
}

/// Trains the trainable parameters of `model` in place. The model keeps the
/// weights of the final step; the lowest-validation-loss weights are returned
/// and, when `out` is given, persisted under `out/checkpoints/<step>/` with
/// `out/best` naming the directory. `out/history.csv` is rewritten each epoch.
pub fn train(
    model: &mut SegModel<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation sets".into()));
    }
    let classes = model.config.decoder.num_classes;
    for s in train_set.iter().chain(val_set) {
        s.validate_classes(classes)?;
    }
    if cfg.freeze_decoder {
        model.params.set_trainable_prefix("decoder.", false);
        model.params.set_trainable_prefix("fusion.", false);
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let val_refs: Vec<&Sample> = val_set.iter().collect();
    let mut state = TrainState {
        step: 0,
        optimizer: Adam::new(&model.params, cfg),
        best_val_loss: f64::INFINITY,
        best_checkpoint: None,
        epoch_seed: 0,
    };
    let mut best_params = model.params.clone();
    let mut best_step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let mut step_batches = Vec::with_capacity(total);
    if let Some(out) = out {
        fs::create_dir_all(out)?;
    }

    for epoch in 0..cfg.epochs {
        state.epoch_seed = epoch_seed(cfg.seed, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(state.epoch_seed);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| match cfg.augment {
                    true => augment_with(&train_set[i], &mut rng, &cfg.augmentation),
                    false => train_set[i].clone(),
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let step = state.step;
            let loss = (|| {
                let mut tape = Tape::new();
                let x = tape.constant(batch_images(&refs)?)?;
                let logits = model.forward(&mut tape, x)?;
                let loss = tape.dice_ce_loss(logits, &batch_labels(&refs))?;
                tape.backward(loss)?;
                model.params.absorb_grads(tape.param_grads());
                Ok(tape.value(loss).data()[0] as f64)
            })()
            .map_err(|e| non_finite(e, epoch, step, &batch))?;
            lr = lr_at(step, total, cfg);
            state.optimizer.step(&mut model.params, lr)?;
            model.params.zero_grads();
            step_losses.push(loss);
            step_batches.push(batch.iter().map(|s| s.id.clone()).collect());
            loss_sum += loss;
            state.step += 1;
        }
        let val_loss = mean_loss(model, &val_refs, cfg.batch_size).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss {
                epoch,
                step: state.step,
                batch_ids: "validation".into(),
            },
            other => other,
        })?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_loss,
            lr,
        });
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            best_step = state.step;
            best_params = model.params.clone();
            if let Some(out) = out {
                state.best_checkpoint = Some(save_checkpoint(model, out, state.step)?);
            }
        }
        if let Some(out) = out {
            fs::write(out.join("history.csv"), history_csv(&history))?;
        }
    }
    Ok(TrainOutcome {
        history,
        step_losses,
        step_batches,
        best_step,
        best_params,
        state,
    })
}
