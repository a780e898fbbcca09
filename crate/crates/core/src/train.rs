//! Training loop for the four regimes, evaluation and checkpoints.

use serde::{Deserialize, Serialize};

use crate::data::{Augment, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{Method, Model};
use crate::ops::{argmax_rows, lr_schedule, softmax_cross_entropy, BnLayerState, Mode, SgdParams};
use crate::rng::{streams, RngStream};
use crate::supermask::Trainable;
use crate::tensor::{Scalar, Tensor};

fn default_cadence() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last).
    #[serde(default = "default_cadence")]
    pub eval_cadence: usize,
    #[serde(default)]
    pub augment: Option<Augment>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl TrainConfig {
    /// 200 epochs, batch 128, SGD momentum 0.9, weight decay 5e-4, cosine
    /// schedule, standard CIFAR augmentation.
    pub fn cifar(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 200,
            batch_size: 128,
            base_lr: 0.1,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            eval_cadence: 1,
            augment: Some(Augment::default()),
            normalization: Normalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs <= self.warmup_epochs {
            return Err(Error::Config(format!(
                "epochs ({}) must exceed warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            )));
        }
        if self.eval_cadence == 0 {
            return Err(Error::Config("eval_cadence must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        Ok(())
    }

    pub fn sgd(&self, lr: f64) -> SgdParams {
        SgdParams {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    /// Fraction of mask bits that changed during the epoch.
    pub mask_flips: f64,
}

/// The trained state of a model: the tensors the method trains (scores, or
/// weights for weight learning) and every BN layer. Frozen weights are never
/// stored; they are regenerated from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T = f32> {
    pub epoch: usize,
    pub val_top1: f64,
    pub trained: Vec<Tensor<T>>,
    pub norms: Vec<BnLayerState<T>>,
}

impl<T: Scalar> Snapshot<T> {
    pub fn capture(model: &Model<T>, epoch: usize, val_top1: f64) -> Self {
        Snapshot {
            epoch,
            val_top1,
            trained: model
                .masked_layers()
                .iter()
                .map(|l| match l.trainable {
                    Trainable::Scores => l.scores().clone(),
                    Trainable::Weights => l.weights().clone(),
                })
                .collect(),
            norms: model.batch_norms().iter().map(|b| b.state.clone()).collect(),
        }
    }

    pub fn restore(&self, model: &mut Model<T>) -> Result<()> {
        let layers = model.masked_layers_mut();
        if layers.len() != self.trained.len() {
            return Err(Error::Config(format!(
                "snapshot has {} layers, model {}",
                self.trained.len(),
                layers.len()
            )));
        }
        for (l, t) in layers.into_iter().zip(&self.trained) {
            match l.trainable {
                Trainable::Scores => l.set_scores(t.clone())?,
                Trainable::Weights => l.set_weights(t.clone())?,
            }
        }
        let norms = model.batch_norms_mut();
        if norms.len() != self.norms.len() {
            return Err(Error::Config("snapshot norm count mismatch".into()));
        }
        for (b, s) in norms.into_iter().zip(&self.norms) {
            if b.channels() != s.channels() || b.state.affine != s.affine {
                return Err(Error::Config("snapshot norm layout mismatch".into()));
            }
            b.state = s.clone();
        }
        model.refresh_masks()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T = f32> {
    pub history: Vec<EpochMetrics>,
    pub best: Snapshot<T>,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    // A trailing batch of one sample cannot be batch-normalized.
    order.chunks(batch_size).filter(|b| b.len() >= 2)
}

fn mask_bits<T: Scalar>(model: &Model<T>) -> Vec<bool> {
    model
        .masked_layers()
        .iter()
        .flat_map(|l| l.mask().bits().iter().copied())
        .collect()
}

/// Trains `model` in place and returns the per-epoch history plus the
/// snapshot with the best validation accuracy. `on_epoch` sees every
/// epoch's metrics as soon as they are known.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.config().method != cfg.method {
        return Err(Error::Config(format!(
            "model built for {} but training config says {}",
            model.config().method,
            cfg.method
        )));
    }
    if train_set.len() < 2 {
        return Err(Error::Data("training set needs at least 2 records".into()));
    }
    let supermask = cfg.method.uses_supermask();
    let frozen = if supermask {
        model.weights_checksum()
    } else {
        model.scores_checksum()
    };
    let mut shuffle = RngStream::new(cfg.seed, streams::SHUFFLE);
    let mut aug_rng = RngStream::new(cfg.seed, streams::AUGMENT);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Snapshot<T>> = None;
    let mut initial_loss = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.base_lr, cfg.warmup_epochs)?;
        let hp = cfg.sgd(lr);
        shuffle.shuffle(&mut order);
        model.refresh_masks()?;
        let before = mask_bits(model);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (bi, idx) in batches(&order, cfg.batch_size).enumerate() {
            let augment = cfg.augment.map(|a| (a, &mut aug_rng));
            let (x, labels) = train_set.batch::<T>(idx, &cfg.normalization, Mode::Train, augment)?;
            model.zero_grad();
            let logits = model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                model.clear_cache();
                return Err(Error::Numerical(format!(
                    "non-finite loss {} at epoch {} batch {} (lr {})",
                    loss, epoch, bi, lr
                )));
            }
            initial_loss.get_or_insert(loss);
            loss_sum += loss * labels.len() as f64;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += labels.len();
            model.backward(&grad)?;
            model.step(hp);
        }
        model.refresh_masks()?;
        let after = mask_bits(model);
        let flips = before.iter().zip(&after).filter(|(a, b)| a != b).count();

        let check = if supermask {
            model.weights_checksum()
        } else {
            model.scores_checksum()
        };
        if check != frozen {
            return Err(Error::Numerical(format!(
                "frozen tensors changed during epoch {} ({:#x} -> {:#x})",
                epoch, frozen, check
            )));
        }

        let last = epoch + 1 == cfg.epochs;
        let val_top1 = if last || (epoch + 1) % cfg.eval_cadence == 0 {
            Some(evaluate(model, val_set, &cfg.normalization, cfg.batch_size)?)
        } else {
            None
        };
        if let Some(v) = val_top1 {
            if best.as_ref().is_none_or(|b| v > b.val_top1) {
                best = Some(Snapshot::capture(model, epoch, v));
            }
        }
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_top1: correct as f64 / seen as f64,
            val_top1,
            mask_flips: flips as f64 / after.len().max(1) as f64,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome {
        history,
        best: best.expect("the last epoch is always evaluated"),
        initial_loss: initial_loss.unwrap_or(f64::NAN),
    })
}

/// Eval-mode logits for every record, in dataset order.
pub fn predict<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<Vec<Tensor<T>>> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    idx.chunks(batch_size.max(1))
        .map(|b| {
            let (x, _) = ds.batch::<T>(b, norm, Mode::Eval, None)?;
            model.forward(&x, Mode::Eval)
        })
        .collect()
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<f64> {
    let logits = predict(model, ds, norm, batch_size)?;
    let preds: Vec<usize> = logits.iter().flat_map(argmax_rows).collect();
    let correct = preds.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean cross-entropy in eval mode.
pub fn evaluate_loss<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for b in idx.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch::<T>(b, norm, Mode::Eval, None)?;
        let logits = model.forward(&x, Mode::Eval)?;
        total += softmax_cross_entropy(&logits, &labels)?.0 * b.len() as f64;
    }
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    Ok(total / ds.len() as f64)
}

/// Runs train-mode forward passes over `ds` without any parameter update so
/// the BN running statistics describe the current masks. Used for the
/// untrained-mask baseline.
pub fn calibrate_bn<T: Scalar>(model: &mut Model<T>, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let order: Vec<usize> = (0..ds.len()).collect();
    for b in batches(&order, cfg.batch_size) {
        let (x, _) = ds.batch::<T>(b, &cfg.normalization, Mode::Eval, None)?;
        model.forward(&x, Mode::Train)?;
    }
    model.clear_cache();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, Split, SyntheticSpec};
    use crate::model::ArchConfig;

    fn tiny() -> (ArchConfig, Dataset, Dataset, TrainConfig) {
        let mut arch = ArchConfig::desk(4);
        arch.base_channels = 4;
        let spec = SyntheticSpec {
            classes: 4,
            size: 4,
            channels: 3,
            separation: 4.0,
        };
        let tr = synthetic_dataset(1, 16, &spec, Split::Train).unwrap();
        let va = synthetic_dataset(1, 8, &spec, Split::Val).unwrap();
        let mut cfg = TrainConfig::cifar(Method::Hfn, 1);
        cfg.epochs = 2;
        cfg.warmup_epochs = 0;
        cfg.batch_size = 8;
        cfg.augment = None;
        (arch, tr, va, cfg)
    }

    #[test]
    fn method_mismatch_is_rejected() {
        let (arch, tr, va, mut cfg) = tiny();
        cfg.method = Method::Hnn;
        let mut m = Model::<f32>::build(&arch, 0).unwrap();
        assert!(matches!(train(&mut m, &tr, &va, &cfg, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn hfn_keeps_weights_and_restores_best() {
        let (arch, tr, va, cfg) = tiny();
        let mut m = Model::<f32>::build(&arch, 0).unwrap();
        let w = m.weights_checksum();
        let s = m.scores_checksum();
        let out = train(&mut m, &tr, &va, &cfg, |_| {}).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(m.weights_checksum(), w);
        assert_ne!(m.scores_checksum(), s);
        out.best.restore(&mut m).unwrap();
        let acc = evaluate(&mut m, &va, &cfg.normalization, 8).unwrap();
        assert_eq!(acc, out.best.val_top1);
    }

    #[test]
    fn empty_split_errors() {
        let (arch, tr, _, cfg) = tiny();
        let mut m = Model::<f32>::build(&arch, 0).unwrap();
        let empty = tr.subset(&[], Split::Test);
        assert!(evaluate(&mut m, &empty, &cfg.normalization, 8).is_err());
    }
}
