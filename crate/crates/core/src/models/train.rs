use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, Classifier, ModelError, Result};
use crate::raster::Sample;
use crate::tensor::{Tape, Tensor};

/// Mini-batch SGD with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 15,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub initial_val_accuracy: Option<f64>,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: Option<f64>,
}

fn check_samples(model: &Classifier, samples: &[Sample]) -> Result<()> {
    let side = model.input_size();
    for s in samples {
        if s.label >= model.num_classes() {
            return Err(ModelError::LabelOutOfRange {
                label: s.label,
                classes: model.num_classes(),
            });
        }
        if s.image.height() != side || s.image.width() != side {
            return Err(ModelError::InputSize {
                model: model.id().to_string(),
                expected: side,
                height: s.image.height(),
                width: s.image.width(),
            });
        }
    }
    Ok(())
}

/// Top-1 accuracy in `[0, 1]`. Runs on the current rayon pool.
pub fn accuracy(model: &Classifier, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let hits = samples
        .par_iter()
        .map(|s| Ok(usize::from(argmax(&model.predict(&s.image)?) == s.label)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

struct SampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor>,
}

fn sample_gradient(model: &Classifier, sample: &Sample) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.to_model_input());
    let (logits, leaves) = model.forward(&mut tape, x, true)?;
    let correct = argmax(tape.value(logits).data()) == sample.label;
    let loss = tape.cross_entropy(logits, sample.label)?;
    let loss_value = f64::from(tape.value(loss).item()?);
    let mut grads = tape.backward(loss)?;
    let grads = leaves
        .into_iter()
        .map(|v| grads.take(v).expect("parameter leaves require grad"))
        .collect();
    Ok(SampleGrad {
        loss: loss_value,
        correct,
        grads,
    })
}

/// Trains `model` in place on `train_set`, reporting per-epoch metrics.
///
/// Per-sample gradients of a batch are computed on the current rayon pool
/// and summed in sample order, so the result does not depend on the number
/// of worker threads.
pub fn train(
    model: &mut Classifier,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(ModelError::InvalidTraining("batch size must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0 && cfg.momentum.is_finite() && cfg.momentum >= 0.0) {
        return Err(ModelError::InvalidTraining(
            "lr and momentum must be finite and non-negative".into(),
        ));
    }
    check_samples(model, train_set)?;
    check_samples(model, val_set)?;

    let initial_val_accuracy = if val_set.is_empty() {
        None
    } else {
        Some(accuracy(model, val_set)?)
    };
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.value().len()]).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch) {
            let frozen: &Classifier = model;
            let per_sample = batch
                .par_iter()
                .map(|&i| sample_gradient(frozen, &train_set[i]))
                .collect::<Result<Vec<_>>>()?;
            for p in model.params_mut() {
                p.zero_grad();
            }
            let scale = 1.0 / batch.len() as f32;
            for sg in &per_sample {
                loss_sum += sg.loss;
                correct += usize::from(sg.correct);
                for (p, g) in model.params_mut().iter_mut().zip(&sg.grads) {
                    p.accumulate(g, scale)?;
                }
            }
            for (p, v) in model.params_mut().iter_mut().zip(velocity.iter_mut()) {
                let grad = p.grad().data().to_vec();
                for ((w, vel), g) in p.value_mut().data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                    *vel = cfg.momentum * *vel + g;
                    *w -= cfg.lr * *vel;
                }
            }
        }
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(accuracy(model, val_set)?)
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
        };
        log::info!(
            "{} epoch {}: loss {:.4} train acc {:.3} val acc {:?}",
            model.id(),
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            m.val_accuracy
        );
        epochs.push(m);
    }
    for p in model.params_mut() {
        p.zero_grad();
    }

    let final_train_accuracy = accuracy(model, train_set)?;
    let final_val_accuracy = epochs.last().and_then(|m| m.val_accuracy).or(initial_val_accuracy);
    let prov = model.provenance_mut();
    prov.epochs = cfg.epochs;
    prov.seed = cfg.seed;
    prov.final_train_accuracy = Some(final_train_accuracy);
    prov.final_val_accuracy = final_val_accuracy;
    Ok(TrainReport {
        epochs,
        initial_val_accuracy,
        final_train_accuracy,
        final_val_accuracy,
    })
}
