//! Mini-batch training loop and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::LabeledImage;
use crate::rng::SplitMix64;
use crate::tasks::{augment, AugmentSpec, TaskSpec};

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, ModelFamily};
use super::network::{batch_from_images, Mode, Network};
use super::ops::softmax_cross_entropy;
use super::optim::{Optimizer, OptimizerKind};

/// Images per forward pass during evaluation. Fixed so results never depend
/// on how a caller groups its inputs.
pub const EVAL_BATCH: usize = 32;

const SHUFFLE_SALT: u64 = 0x5348_5546_464C_4531;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without a validation improvement before the rate is scaled.
    pub lr_patience: usize,
    pub lr_factor: f64,
    /// Epochs without a validation improvement before training stops.
    pub early_stop_patience: usize,
    pub augment: Option<AugmentSpec>,
}

impl TrainConfig {
    /// Adam at 1e-3 for residual networks, SGD with momentum at 0.1 for
    /// dense networks; weight decay 1e-4, batch 32, 60 epochs.
    pub fn recipe(family: ModelFamily, seed: u64) -> Self {
        let (optimizer, learning_rate) = match family {
            ModelFamily::ResNet => (OptimizerKind::Adam, 1e-3),
            ModelFamily::DenseNet => (OptimizerKind::SgdMomentum, 0.1),
        };
        Self {
            optimizer,
            learning_rate,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 60,
            seed,
            lr_patience: 5,
            lr_factor: 0.5,
            early_stop_patience: 10,
            augment: Some(AugmentSpec { seed, ..AugmentSpec::default() }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("lr factor must be in (0, 1], got {}", self.lr_factor));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be >= 1".into());
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

/// `epoch,split,loss,accuracy` with one train and one val row per epoch.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for m in metrics {
        out.push_str(&format!("{},train,{},{}\n", m.epoch, m.train_loss, m.train_accuracy));
        out.push_str(&format!("{},val,{},{}\n", m.epoch, m.val_loss, m.val_accuracy));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub network: Network<f32>,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl CategoryAccuracy {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: Vec<CategoryAccuracy>,
    pub correct: usize,
    pub total: usize,
    /// Mean cross-entropy.
    pub loss: f64,
}

impl EvalReport {
    pub fn overall(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn category(&self, c: usize) -> Option<f64> {
        self.per_category.get(c).and_then(|a| a.accuracy())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_sizes<'a>(config: &ModelConfig, images: impl IntoIterator<Item = &'a LabeledImage>) -> Result<()> {
    let s = config.input_size;
    for img in images {
        if img.image.height() != s || img.image.width() != s {
            return Err(Error::Dataset(format!(
                "image '{}' is {}x{}, model expects {s}x{s}",
                img.source_id,
                img.image.height(),
                img.image.width()
            )));
        }
    }
    Ok(())
}

/// Eval-mode predictions.
pub fn predict(net: &Network<f32>, images: &[&LabeledImage]) -> Result<Vec<usize>> {
    Ok(evaluate_detailed(net, images)?.1)
}

/// Per-category and overall accuracy of argmax predictions.
pub fn evaluate(net: &Network<f32>, images: &[&LabeledImage]) -> Result<EvalReport> {
    Ok(evaluate_detailed(net, images)?.0)
}

fn evaluate_detailed(net: &Network<f32>, images: &[&LabeledImage]) -> Result<(EvalReport, Vec<usize>)> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty image list".into()));
    }
    let k = net.config().num_classes;
    check_sizes(net.config(), images.iter().copied())?;
    let mut per_category = vec![CategoryAccuracy { correct: 0, total: 0 }; k];
    let mut predictions = Vec::with_capacity(images.len());
    let mut loss_sum = 0.0;
    for chunk in images.chunks(EVAL_BATCH) {
        let x = batch_from_images::<f32>(chunk.iter().map(|s| &s.image))?;
        let logits = net.predict(&x)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        loss_sum += softmax_cross_entropy(&logits, &labels)?.loss * chunk.len() as f64;
        for (s, row) in chunk.iter().zip(logits.data.chunks(k)) {
            let p = argmax(row);
            predictions.push(p);
            let slot = per_category
                .get_mut(s.label)
                .ok_or_else(|| Error::Dataset(format!("label {} out of range for {k} classes", s.label)))?;
            slot.total += 1;
            if p == s.label {
                slot.correct += 1;
            }
        }
    }
    let correct = per_category.iter().map(|c| c.correct).sum();
    let report = EvalReport { per_category, correct, total: images.len(), loss: loss_sum / images.len() as f64 };
    Ok((report, predictions))
}

/// Train `config` on `task`.
pub fn train(config: &ModelConfig, task: &TaskSpec, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(config, task, tc, |_| {})
}

/// As [`train`], calling `observe` after every epoch.
pub fn train_observed(
    config: &ModelConfig,
    task: &TaskSpec,
    tc: &TrainConfig,
    mut observe: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    tc.validate()?;
    task.validate()?;
    if task.train.is_empty() || task.val.is_empty() {
        return Err(Error::Dataset("training and validation splits must be non-empty".into()));
    }
    if task.categories.len() != config.num_classes {
        return Err(Error::Dataset(format!(
            "task has {} categories, model has {} outputs",
            task.categories.len(),
            config.num_classes
        )));
    }
    check_sizes(config, task.train.iter().chain(&task.val))?;

    let mut net = Network::<f32>::new(config, tc.seed)?;
    let mut opt = Optimizer::new(tc.optimizer, net.store());
    let val_refs: Vec<&LabeledImage> = task.val.iter().collect();
    let n = task.train.len();
    let mut lr = tc.learning_rate;
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Network<f32>)> = None;
    let mut stale = 0usize;

    for epoch in 1..=tc.epochs {
        let order = SplitMix64::stream(tc.seed ^ SHUFFLE_SALT, epoch as u64).permutation(n);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let images: Vec<_> = idx
                .iter()
                .enumerate()
                .map(|(j, &i)| match &tc.augment {
                    Some(a) => {
                        let slot = ((epoch - 1) * n + b * tc.batch_size + j) as u64;
                        augment(&task.train[i].image, a, &mut SplitMix64::stream(a.seed, slot))
                    }
                    None => task.train[i].image.clone(),
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| task.train[i].label).collect();
            let x = batch_from_images::<f32>(&images)?;
            let diverged = |loss: f64| Error::Divergence { epoch, batch: b, loss };
            let (logits, tape) = match net.forward(&x, Mode::Train) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let out = softmax_cross_entropy(&logits, &labels)?;
            if !out.loss.is_finite() {
                return Err(diverged(out.loss));
            }
            let k = config.num_classes;
            correct += logits.data.chunks(k).zip(&labels).filter(|(row, l)| argmax(row) == **l).count();
            loss_sum += out.loss * labels.len() as f64;
            let (_, grads) = match net.backward(&tape, out.grad) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(out.loss)),
                Err(e) => return Err(e),
            };
            net.commit_batch_stats(&tape);
            opt.apply(net.store_mut(), &grads, lr, tc.weight_decay)?;
        }
        let val = evaluate(&net, &val_refs)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_loss: val.loss,
            val_accuracy: val.overall(),
            learning_rate: lr,
        };
        observe(&m);
        metrics.push(m);

        if best.as_ref().is_none_or(|(acc, _, _)| val.overall() > *acc) {
            best = Some((val.overall(), epoch, net.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.early_stop_patience {
                break;
            }
            if stale % tc.lr_patience == 0 {
                lr *= tc.lr_factor;
            }
        }
    }

    let (best_epoch, network) = match best {
        Some((_, e, best_net)) => (e, best_net),
        None => (0, net),
    };
    let checkpoint = Checkpoint::from_network(&network, Some(&opt), best_epoch, tc.seed);
    Ok(TrainOutcome { network, checkpoint, metrics, best_epoch })
}
