use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor4, UNet};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayFrame};
use crate::metrics::{dice_coefficient, iou, pixel_accuracy, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Dice,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(LossKind::Bce),
            "dice" => Ok(LossKind::Dice),
            other => Err(Error::invalid(format!("unknown loss {other:?} (expected bce or dice)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { loss: LossKind::Dice, learning_rate: 0.001, batch_size: 4, epochs: 30, val_fraction: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!("val_fraction must be in (0,1), got {}", self.val_fraction)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

/// `(n_train, n_val)` for `n` samples. At least one sample always trains;
/// a lone sample is also used for validation.
pub fn split_counts(n: usize, val_fraction: f64) -> (usize, usize) {
    if n <= 1 {
        return (n, 0);
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n - 1);
    (n - n_val, n_val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    pub val_pixel_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned weights.
    pub best: usize,
    pub n_train: usize,
    pub n_val: usize,
}

impl TrainHistory {
    pub fn best_record(&self) -> &EpochRecord {
        &self.epochs[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_dice,val_iou,val_pixel_acc\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.train_loss, r.val_loss, r.val_dice, r.val_iou, r.val_pixel_acc
            );
        }
        s
    }
}

struct Scores {
    loss: f64,
    dice: f64,
    iou: f64,
    pixel_acc: f64,
}

fn evaluate<T: Scalar>(model: &UNet<T>, samples: &[&(GrayFrame, BinaryMask)], kind: LossKind) -> Result<Scores> {
    let mut acc = Scores { loss: 0.0, dice: 0.0, iou: 0.0, pixel_acc: 0.0 };
    for chunk in samples.chunks(8) {
        let batch = Tensor4::<T>::from_frames(chunk.iter().map(|s| &s.0))?;
        let (probs, _) = model.forward(&batch, false, 0)?;
        for (i, (_, truth)) in chunk.iter().map(|s| (&s.0, &s.1)).enumerate() {
            let p = probs.sample(i);
            acc.loss += super::sample_loss(p, truth.bits(), kind);
            let (w, h) = truth.dims();
            let pred = ProbMap::new(w, h, p.iter().map(|v| v.as_f64()).collect())?.threshold(0.5);
            acc.dice += dice_coefficient(truth, &pred)?.value;
            acc.iou += iou(truth, &pred)?.value;
            acc.pixel_acc += pixel_accuracy(truth, &pred)?;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(Scores { loss: acc.loss / n, dice: acc.dice / n, iou: acc.iou / n, pixel_acc: acc.pixel_acc / n })
}

/// Trains and returns the weights of the best validation-Dice epoch.
pub fn train<T: Scalar>(
    model: UNet<T>,
    dataset: &[(GrayFrame, BinaryMask)],
    cfg: &TrainConfig,
) -> Result<(UNet<T>, TrainHistory)> {
    train_with(model, dataset, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    mut model: UNet<T>,
    dataset: &[(GrayFrame, BinaryMask)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(UNet<T>, TrainHistory)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let (h, w) = model.config().input_size;
    for (frame, mask) in dataset {
        if frame.dims() != (w, h) {
            return Err(Error::DimensionMismatch { expected: (w, h), actual: frame.dims() });
        }
        if mask.dims() != (w, h) {
            return Err(Error::DimensionMismatch { expected: (w, h), actual: mask.dims() });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let (n_train, n_val) = split_counts(dataset.len(), cfg.val_fraction);
    let mut train_idx = order[..n_train].to_vec();
    let val: Vec<&(GrayFrame, BinaryMask)> = if n_val == 0 {
        train_idx.iter().map(|&i| &dataset[i]).collect()
    } else {
        order[n_train..].iter().map(|&i| &dataset[i]).collect()
    };

    let mut history = TrainHistory { epochs: Vec::with_capacity(cfg.epochs), best: 0, n_train, n_val };
    let mut best: Option<(f64, UNet<T>)> = None;
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = Tensor4::<T>::from_frames(chunk.iter().map(|&i| &dataset[i].0))?;
            let truths: Vec<BinaryMask> = chunk.iter().map(|&i| dataset[i].1.clone()).collect();
            let (_, cache) = model.forward(&batch, true, rng.random())?;
            let grads = model.backward(&cache, &truths, cfg.loss, 1.0 / chunk.len() as f64)?;
            loss_sum += grads.loss * chunk.len() as f64;
            model.adam_step(&grads, cfg.learning_rate)?;
        }
        let scores = evaluate(&model, &val, cfg.loss)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_loss: scores.loss,
            val_dice: scores.dice,
            val_iou: scores.iou,
            val_pixel_acc: scores.pixel_acc,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(d, _)| record.val_dice > *d) {
            best = Some((record.val_dice, model.clone()));
            history.best = history.epochs.len();
        }
        history.epochs.push(record);
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}
