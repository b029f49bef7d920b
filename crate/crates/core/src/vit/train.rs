//! Supervised training of the micro-ViT on labelled images.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss, ForwardOptions, ViTModel};
use crate::autograd::{grad_check_stencil, GradCheckReport, Stencil, Tape};
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        let mut optimizer = OptimizerConfig::default_for(OptimizerKind::AdamW);
        optimizer.lr = 3e-3;
        optimizer.weight_decay = 0.05;
        ModelTrainConfig {
            epochs: 5,
            batch_size: 16,
            optimizer,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Top-1 accuracy of the model's classifier head.
pub fn accuracy(model: &ViTModel, data: &[(Tensor, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("accuracy on an empty set"));
    }
    let mut correct = 0;
    for (img, label) in data {
        let acts = model.forward(img, ForwardOptions::default())?;
        if acts.predicted_class() == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch training with per-epoch seeded shuffling. Identical inputs and
/// seeds give bitwise-identical weights.
pub fn train_classifier(
    model: &mut ViTModel,
    train: &[(Tensor, usize)],
    val: &[(Tensor, usize)],
    cfg: &ModelTrainConfig,
) -> Result<Vec<EpochStats>> {
    if train.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::contract("training needs data, a batch size and epochs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer.build();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Tensor, usize)> = chunk.iter().map(|&i| (&train[i].0, train[i].1)).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let loss = batch_loss(&model.config, &mut tape, &vars, &batch)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss: value });
            }
            total += value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let mut handles = Vec::new();
            vars.for_each(|_, &v| handles.push(v));
            let mut params = model.params.values_mut();
            for (p, v) in params.iter_mut().zip(&handles) {
                p.grad = Some(grads.take_or_zeros(*v, p.numel()));
            }
            opt.step(&mut params, cfg.optimizer.lr);
        }
        let val_accuracy = if val.is_empty() { None } else { Some(accuracy(model, val)?) };
        history.push(EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy,
        });
    }
    model.params.for_each_mut(|_, t| t.zero_grad());
    Ok(history)
}

/// Central-difference check of the batch cross-entropy gradient over every
/// parameter entry. The report's `param` indexes canonical order.
pub fn grad_check_model(
    model: &ViTModel,
    batch: &[(Tensor, usize)],
    h: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    let mut params = Vec::with_capacity(model.params.len());
    model.params.for_each(|_, t| params.push(t.clone()));
    let pairs: Vec<(&Tensor, usize)> = batch.iter().map(|(t, y)| (t, *y)).collect();
    grad_check_stencil(
        |tape, vars| {
            let mut next = vars.iter().copied();
            let p = model.params.map(&mut |_, _| next.next().expect("one var per parameter"));
            batch_loss(&model.config, tape, &p, &pairs)
        },
        &params,
        h,
        stencil,
    )
}
