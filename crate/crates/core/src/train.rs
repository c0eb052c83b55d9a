//! Epoch/batch training loop with best-epoch selection by development-set
//! QWK. One fold in, best parameters and a full history out.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{denormalize_score, PromptSpecs};
use crate::error::{Error, Result};
use crate::eval::per_prompt_mean_qwk;
use crate::model::{init_params, loss_and_grads, predict, ModelConfig, ModelParams};
use crate::optim::{clip_global_norm, rmsprop_step, OptimState, RmsPropConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{EmbeddingMatrix, EncodedEssay};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: RmsPropConfig,
    /// Global gradient-norm cap; off by default.
    pub clip_norm: Option<f64>,
    /// Per-epoch learning-rate decay, lr_e = lr / (1 + decay * (e - 1));
    /// zero (off) by default.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            epochs: 50,
            seed: 42,
            model: ModelConfig::default(),
            optimizer: RmsPropConfig::default(),
            clip_norm: None,
            lr_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        if !self.lr_decay.is_finite() || self.lr_decay < 0.0 {
            return Err(Error::Config(format!(
                "lr decay {} must be non-negative",
                self.lr_decay
            )));
        }
        self.model.validate()?;
        self.optimizer.validate()
    }
}

/// One epoch of history. Gaze losses are raw per-attribute MSEs averaged
/// over essays that carried at least one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub score_loss: f64,
    pub gaze_losses: [f64; 5],
    pub labeled_essays: usize,
    pub dev_qwk: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_dev_qwk: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Seed-determined partition of `0..n` into batches. Every index appears
/// exactly once; the final batch absorbs the remainder.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[]);
    order.shuffle(&mut r);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn dev_qwk(
    params: &ModelParams,
    model: &ModelConfig,
    dev: &[EncodedEssay],
    specs: &PromptSpecs,
) -> Result<f64> {
    let mut items = Vec::with_capacity(dev.len());
    for enc in dev {
        let spec = specs.require(enc.prompt_id)?;
        let pred = predict(params, model, enc)?;
        let rating = denormalize_score(pred.score_unit, spec)?;
        items.push((enc.prompt_id, enc.gold, rating));
    }
    per_prompt_mean_qwk(&items, specs)
}

/// Trains one fold: initialize from the fold's embeddings, run
/// `cfg.epochs` epochs of shuffled mini-batches with mean-of-batch
/// gradients, score the dev set after every epoch, and return the
/// parameters of the best dev-QWK epoch (earliest on ties).
pub fn train_fold(
    train: &[EncodedEssay],
    dev: &[EncodedEssay],
    embeddings: &EmbeddingMatrix,
    specs: &PromptSpecs,
    cfg: &TrainConfig,
    mut observer: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("development set is empty".into()));
    }
    for t in train {
        if dev.iter().any(|d| d.essay_id == t.essay_id) {
            return Err(Error::Config(format!(
                "essay {} appears in both train and dev",
                t.essay_id
            )));
        }
    }

    let mut params = init_params(&cfg.model, embeddings, cfg.seed)?;
    let mut state = OptimState::new(&params, cfg.optimizer)?;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_qwk = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        state.hyper.lr = cfg.optimizer.lr / (1.0 + cfg.lr_decay * (epoch as f64 - 1.0));
        let shuffle_seed = rng::combine_seed(
            rng::combine_seed(cfg.seed, rng::domain::SHUFFLE),
            epoch as u64,
        );
        let batches = batch_iter(train.len(), cfg.batch_size, shuffle_seed)?;

        let mut loss_sum = 0.0;
        let mut score_sum = 0.0;
        let mut gaze_sums = [0.0; 5];
        let mut labeled = 0usize;
        for batch in &batches {
            let mut grad_sum: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &idx in batch {
                let enc = &train[idx];
                let mut drop_rng = rng::stream(
                    cfg.seed,
                    &[rng::domain::DROPOUT, epoch as u64, u64::from(enc.essay_id)],
                );
                let (comps, grads) = loss_and_grads(&params, &cfg.model, enc, &mut drop_rng)
                    .map_err(|e| {
                        Error::Training(format!("essay {} epoch {epoch}: {e}", enc.essay_id))
                    })?;
                loss_sum += comps.total;
                score_sum += comps.score;
                if comps.labeled_tokens > 0 {
                    labeled += 1;
                    for (s, g) in gaze_sums.iter_mut().zip(comps.gaze) {
                        *s += g;
                    }
                }
                for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                    acc.axpy(1.0, g)?;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_sum {
                g.scale_in_place(inv);
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grad_sum, c)?;
            }
            rmsprop_step(&mut params, &grad_sum, &mut state)?;
        }

        let n = train.len() as f64;
        let qwk = dev_qwk(&params, &cfg.model, dev, specs)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            score_loss: score_sum / n,
            gaze_losses: if labeled > 0 {
                gaze_sums.map(|s| s / labeled as f64)
            } else {
                [0.0; 5]
            },
            labeled_essays: labeled,
            dev_qwk: qwk,
        };
        if qwk > best_qwk {
            best_qwk = qwk;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(&record);
        }
        history.push(record);
    }

    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        best_dev_qwk: if cfg.epochs > 0 { Some(best_qwk) } else { None },
        history,
    })
}
