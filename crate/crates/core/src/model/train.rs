//! Teacher-forced training with AdamW under a linear schedule.

use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW, AdamWConfig, LinearSchedule};
use super::tape::{Mat, Tape};
use super::transformer::{ModelInput, RuleCapModel};
use crate::error::{Error, Result};

/// One training pair: model input and caption ids (no BOS/EOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub input: ModelInput,
    pub target: Vec<usize>,
}

/// Mean token cross-entropy over the batch and its gradient for every
/// parameter.
pub fn batch_loss_and_grads(
    model: &RuleCapModel,
    batch: &[TrainExample],
) -> Result<(f64, Vec<Mat>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut tape = Tape::new(&model.params);
    let mut losses = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for ex in batch {
        let (l, n) = model.sequence_loss(&mut tape, &ex.input, &ex.target)?;
        losses.push(l);
        tokens += n;
    }
    let total = tape.sum(&losses);
    let mean = tape.scale(total, 1.0 / tokens as f64);
    let loss = tape.value(mean)[[0, 0]];
    Ok((loss, tape.backward(mean)))
}

/// Mean token cross-entropy without gradients.
pub fn batch_loss(model: &RuleCapModel, batch: &[TrainExample]) -> Result<f64> {
    let mut tape = Tape::new(&model.params);
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in batch {
        let (l, n) = model.sequence_loss(&mut tape, &ex.input, &ex.target)?;
        total += tape.value(l)[[0, 0]];
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub adamw: AdamWConfig,
    pub schedule: LinearSchedule,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainerConfig,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainerConfig, model: &RuleCapModel) -> Self {
        Trainer {
            config,
            opt: AdamW::for_store(config.adamw, &model.params),
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr(self.step)
    }
}

/// One optimizer update on `batch`; returns the pre-update loss.
pub fn train_step(
    model: &mut RuleCapModel,
    trainer: &mut Trainer,
    batch: &[TrainExample],
    batch_id: usize,
) -> Result<f64> {
    let (loss, mut grads) = batch_loss_and_grads(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: batch_id });
    }
    clip_grad_norm(&mut grads, trainer.config.clip_norm);
    let lr = trainer.current_lr();
    trainer.opt.step(&mut model.params, &grads, lr);
    trainer.step += 1;
    Ok(loss)
}
