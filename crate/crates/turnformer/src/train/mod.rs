//! Loss, metrics, and the training loop.
//!
//! Mini-batch Adam over a fresh tape per batch; dropout active in training
//! and off in evaluation; the best-validation parameters are retained and
//! restored at the end. Fully deterministic under (seed, parallelism): every
//! RNG is derived from the run seed, the epoch, and the sample position.

pub mod grid;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{load_state_dict, state_dict, Model};
use crate::nn::Phase;
use crate::tensor::{AdamConfig, AdamState, Element, Gradients, Tape, Tensor};

/// Folds a list of values into one seed (splitmix64 over each part).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Early-stopping patience on validation accuracy; `None` disables it.
    pub patience: Option<usize>,
    /// Stop as soon as the training accuracy reaches this level.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 1e-7,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            patience: Some(10),
            stop_at_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Validation accuracy of the retained checkpoint (training accuracy
    /// when no validation split was given).
    pub best_metric: f64,
}

/// Cross-entropy `-ln p[target]`, computed from pre-softmax logits in the
/// fused log-sum-exp form.
pub fn cross_entropy<E: Element>(
    tape: &mut Tape<E>,
    logits: &Tensor<E>,
    target: usize,
) -> Result<Tensor<E>> {
    tape.cross_entropy_logits(logits, target)
}

/// Fraction of predictions whose argmax hits the target; argmax ties break
/// toward the lowest class index.
pub fn top1_accuracy<E: Element>(predictions: &[Tensor<E>], targets: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "top1_accuracy needs equal non-zero lengths, got {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p.argmax_row(0) == **t)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Class probabilities for one sample in eval mode, detached from any tape.
pub fn predict<E: Element>(model: &dyn Model<E>, sample: &Sample) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, sample, &mut Phase::Eval)?;
    Ok(out.probabilities(&mut tape)?.detach())
}

/// Top-1 accuracy of the model over a sample set, dropout off.
pub fn evaluate<E: Element>(model: &dyn Model<E>, samples: &[Sample]) -> Result<f64> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(predict(model, s)?);
        targets.push(s.target_label);
    }
    top1_accuracy(&preds, &targets)
}

fn param_norm<E: Element>(model: &dyn Model<E>) -> f64 {
    let mut sq = 0.0;
    model.visit_params(&mut |p| {
        sq += p.value.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
    });
    sq.sqrt()
}

fn apply_gradients<E: Element>(
    adam: &mut AdamState<E>,
    model: &mut dyn Model<E>,
    grads: &Gradients<E>,
) -> Result<()> {
    adam.begin_step();
    let mut first_err = None;
    model.visit_params_mut(&mut |p| {
        if first_err.is_some() {
            return;
        }
        if let Some(g) = grads.get(&p.name) {
            if let Err(e) = adam.update_param(&p.name, &mut p.value, g) {
                first_err = Some(e);
            }
        }
    });
    first_err.map_or(Ok(()), Err)
}

/// Trains in place and restores the best checkpoint before returning.
pub fn train_model<E: Element>(
    model: &mut dyn Model<E>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }

    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });

    let mut best: BTreeMap<String, Tensor<E>> = state_dict(model).into_iter().collect();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut patience_left = cfg.patience;
    let mut history = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 1, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut batch_loss: Option<Tensor<E>> = None;
            for (pos, &si) in chunk.iter().enumerate() {
                let sample = &train[si];
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    cfg.seed,
                    2,
                    epoch as u64,
                    batch_idx as u64,
                    pos as u64,
                ]));
                let out = model
                    .forward(&mut tape, sample, &mut Phase::Train { rng: &mut rng })
                    .map_err(|e| annotate_nonfinite(e, epoch, batch_idx, model))?;
                let probs = out.probabilities(&mut tape)?;
                if probs.argmax_row(0) == sample.target_label {
                    correct += 1;
                }
                let loss = out
                    .loss(&mut tape, sample.target_label)
                    .map_err(|e| annotate_nonfinite(e, epoch, batch_idx, model))?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(&acc, &loss)?,
                    None => loss,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let mean = tape.scale(&total, E::from_f64(1.0 / chunk.len() as f64))?;
            let loss_value = mean.item().as_f64();
            if !loss_value.is_finite() {
                return Err(annotate_nonfinite(
                    Error::NonFinite("loss".into()),
                    epoch,
                    batch_idx,
                    model,
                ));
            }
            loss_sum += loss_value * chunk.len() as f64;

            let grads = tape.backward(&mean)?;
            apply_gradients(&mut adam, model, &grads)?;
        }

        let train_loss = loss_sum / train.len() as f64;
        let train_acc = correct as f64 / train.len() as f64;
        let val_acc = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, val)?)
        };
        history.push(EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            val_acc,
        });

        let metric = val_acc.unwrap_or(train_acc);
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best = state_dict(model).into_iter().collect();
            patience_left = cfg.patience;
        } else if let Some(left) = patience_left.as_mut() {
            if *left == 0 {
                break 'epochs;
            }
            *left -= 1;
        }

        if let Some(stop) = cfg.stop_at_train_acc {
            if train_acc >= stop {
                break 'epochs;
            }
        }
    }

    load_state_dict(model, &best)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_metric,
    })
}

fn annotate_nonfinite<E: Element>(
    err: Error,
    epoch: usize,
    batch: usize,
    model: &dyn Model<E>,
) -> Error {
    match err {
        Error::NonFinite(detail) => Error::NonFinite(format!(
            "{detail} at epoch {epoch}, batch {batch} (parameter norm {:.3e})",
            param_norm(model)
        )),
        other => other,
    }
}
