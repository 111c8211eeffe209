//! Mini-batch Adam training and batched inference over sample sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::Sample;
use super::{Coalition, ForecastBundle, TempoModel};
use crate::backbone::params::{ParamGrads, ParamGroup};
use crate::backbone::tape::Mat;
use crate::error::{invalid, Result, TempoError};
use crate::metrics::Metrics;
use crate::norm::AffinePair;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// Seed offsets keep the shuffle and dropout streams independent of
// parameter initialization, which uses `seed` directly.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss (MSE plus weighted decomposition loss).
    pub train_loss: f64,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Selection score of the kept parameters: validation MSE, or training
    /// MSE without a validation set.
    pub best_score: f64,
}

/// First and second moment estimates, aligned with the parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(model: &TempoModel) -> Self {
        let zeros: Vec<Mat> = model.params.iter().map(|p| Mat::zeros(p.value.dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update of every trainable tensor. Missing gradients count as zero.
    pub fn step(&mut self, model: &mut TempoModel, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (id, p) in model.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let zero;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    zero = Mat::zeros(p.value.dim());
                    &zero
                }
            };
            ndarray::Zip::from(&mut p.value)
                .and(&mut self.m[id])
                .and(&mut self.v[id])
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
            if p.group == ParamGroup::RevinAffine && p.name.ends_with(".gamma") {
                p.value.mapv_inplace(AffinePair::clamp_gamma);
            }
        }
    }
}

/// Trains `model` in place and restores the parameters of the best epoch.
///
/// The sample order of every epoch comes from a generator seeded by
/// `config.seed`, so two runs with equal inputs produce identical histories.
pub fn train(model: &mut TempoModel, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainHistory> {
    if train_set.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    let cfg = model.config.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut adam = Adam::new(model);
    let mut best: Option<(f64, usize, crate::backbone::params::ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut per_sample = vec![(0.0, 0.0); train_set.len()];
        for batch in order.chunks(cfg.batch) {
            let results: Vec<_> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let sample = &train_set[i];
                    let mut rng = (cfg.backbone.dropout > 0.0).then(|| {
                        ChaCha8Rng::seed_from_u64((cfg.seed ^ DROPOUT_STREAM).wrapping_add(steps * cfg.batch as u64 + j as u64))
                    });
                    model.loss_and_grad(&sample.input(), &sample.target, rng.as_mut())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = ParamGrads::zeros_like(&model.params);
            for (&i, (parts, g)) in batch.iter().zip(&results) {
                if !parts.total.is_finite() || !g.is_finite() {
                    return Err(TempoError::Divergence(format!(
                        "non-finite loss or gradient at epoch {epoch}, sample {i}"
                    )));
                }
                per_sample[i] = (parts.total, parts.mse);
                grads.add_assign(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model, &grads, cfg.lr);
            steps += 1;
        }

        let n = train_set.len() as f64;
        let train_loss = per_sample.iter().map(|p| p.0).sum::<f64>() / n;
        let train_mse = per_sample.iter().map(|p| p.1).sum::<f64>() / n;
        let val_mse = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, val_set)?.mse)
        };
        let score = val_mse.unwrap_or(train_mse);
        if !score.is_finite() {
            return Err(TempoError::Divergence(format!("non-finite score {score} at epoch {epoch}")));
        }
        log::info!("epoch {epoch}: train_loss={train_loss:.6} train_mse={train_mse:.6} val_mse={val_mse:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_mse,
            val_mse,
        });
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.params.clone()));
        }
    }

    let (best_score, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainHistory {
        epochs: history,
        best_epoch,
        best_score,
    })
}

/// Forecast bundles for every sample, in sample order.
pub fn predict(model: &TempoModel, samples: &[Sample]) -> Result<Vec<ForecastBundle>> {
    predict_masked(model, samples, Coalition::FULL)
}

pub fn predict_masked(model: &TempoModel, samples: &[Sample], coalition: Coalition) -> Result<Vec<ForecastBundle>> {
    samples
        .par_iter()
        .map(|s| model.forward_masked(&s.input(), coalition))
        .collect()
}

/// Metrics over all horizon points of all samples.
pub fn evaluate(model: &TempoModel, samples: &[Sample]) -> Result<Metrics> {
    evaluate_masked(model, samples, Coalition::FULL)
}

pub fn evaluate_masked(model: &TempoModel, samples: &[Sample], coalition: Coalition) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(invalid!("evaluation set is empty"));
    }
    let bundles = predict_masked(model, samples, coalition)?;
    Ok(metrics_of(&bundles, samples))
}

pub fn metrics_of(bundles: &[ForecastBundle], samples: &[Sample]) -> Metrics {
    let forecast: Vec<f64> = bundles.iter().flat_map(|b| b.y_hat.iter().copied()).collect();
    let actual: Vec<f64> = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    Metrics::compute(&forecast, &actual)
}
