//! SGD with momentum and the epoch loop.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::Cafct;
use crate::numerics::{seeded_rng, Forward, Graph, Mode, ParamStore, Tensor, BN_MOMENTUM};
use crate::objective::{bce_dice_loss, confusion_counts, metrics_from_counts, threshold_logits, ConfusionCounts};

use super::checkpoint::{save_checkpoint, RngState};
use super::config::TrainConfig;
use super::data::{stack, SegSample};

/// `buf = momentum * buf + (g + weight_decay * p)`, `p -= lr * buf`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, buffers: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.buffers.is_empty() {
            self.buffers = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        for (p, buf) in store.params_mut().iter_mut().zip(&mut self.buffers) {
            let (m, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            let values = p.value.data_mut();
            for ((b, &g), v) in buf.data_mut().iter_mut().zip(p.grad.data()).zip(values.iter_mut()) {
                *b = m * *b + g + wd * *v;
                *v -= lr * *b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Global Dice of the thresholded training-mode predictions.
    pub dice: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch={} loss={:.6} dice={:.6}", self.epoch, self.loss, self.dice)
    }
}

/// Shuffle order of one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed ^ (epoch + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

pub fn check_dataset(model: &Cafct, data: &[SegSample]) -> Result<()> {
    let s = model.config.encoder.input_size;
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    for d in data {
        if d.image.shape() != [1, s, s] || d.mask.shape() != [1, s, s] {
            return Err(Error::shape(format!(
                "sample {} is {:?} but the model expects [1, {s}, {s}]",
                d.id,
                d.image.shape()
            )));
        }
    }
    Ok(())
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Cafct,
    pub sgd: Sgd,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model: Cafct::new(&config.model, config.seed)?,
            sgd: Sgd::new(config.learning_rate, config.momentum, config.weight_decay),
            config: config.clone(),
            epochs_done: 0,
        })
    }

    /// One forward/backward/update on a batch; returns the loss and the
    /// confusion counts of the batch's (pre-update) predictions.
    pub fn step(&mut self, images: &Tensor, masks: &Tensor) -> Result<(f64, ConfusionCounts)> {
        let model = &mut self.model;
        model.store.zero_grads();
        let g = Graph::new();
        let f = Forward::new(&g, &model.store, Mode::Train);
        let out = model.arch.forward(&f, g.constant(images.clone()))?;
        let loss = bce_dice_loss(out.logits, masks, self.config.w_bce, self.config.w_dice)?;
        let counts = confusion_counts(&threshold_logits(&out.logits.value()), masks)?;
        let loss_value = loss.value().item();
        let grads = g.backward(loss)?;
        let bindings = f.finish();
        model.store.accumulate_grads(&bindings, &grads);
        model.store.apply_batch_stats(&bindings, BN_MOMENTUM);
        self.sgd.step(&mut model.store);
        Ok((loss_value, counts))
    }

    pub fn run_epoch(&mut self, data: &[SegSample]) -> Result<EpochLog> {
        check_dataset(&self.model, data)?;
        let epoch = self.epochs_done as u64;
        let order = epoch_order(data.len(), self.config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut counts = ConfusionCounts::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (images, masks) = stack(&batch)?;
            let (loss, c) = self.step(&images, &masks)?;
            loss_sum += loss * batch.len() as f64;
            counts = counts + c;
        }
        self.epochs_done += 1;
        Ok(EpochLog {
            epoch: self.epochs_done,
            loss: loss_sum / data.len() as f64,
            dice: metrics_from_counts(counts).dice,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.config.seed, next_epoch: self.epochs_done as u64 }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.model, self.epochs_done as u32, self.rng_state())
    }
}

/// Train for `config.epochs` epochs, saving `config.checkpoint` after each
/// one and reporting every epoch to `on_epoch`.
pub fn train(config: &TrainConfig, data: &[SegSample], mut on_epoch: impl FnMut(&EpochLog)) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    check_dataset(&trainer.model, data)?;
    for _ in 0..config.epochs {
        let log = trainer.run_epoch(data)?;
        trainer.save(&config.checkpoint)?;
        on_epoch(&log);
    }
    trainer.save(&config.checkpoint)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step_is_minus_lr_grad() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::new(&[3], vec![0.5, 0.25, -4.0]).unwrap();
        let mut sgd = Sgd::new(0.1, 0.0, 0.0);
        sgd.step(&mut store);
        assert_eq!(store.get(id).value.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25, 0.5 + 0.1 * 4.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[1])).unwrap();
        store.get_mut(id).grad = Tensor::ones(&[1]);
        let mut sgd = Sgd::new(1.0, 0.5, 0.0);
        sgd.step(&mut store);
        sgd.step(&mut store);
        // buffers 1 then 1.5
        assert_eq!(store.get(id).value.data(), &[-2.5]);
    }

    #[test]
    fn shuffles_are_seeded_permutations() {
        let a = epoch_order(20, 4, 0);
        assert_eq!(a, epoch_order(20, 4, 0));
        assert_ne!(a, epoch_order(20, 4, 1));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }
}
