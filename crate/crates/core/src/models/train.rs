//! Adam training loop over class-rebalanced batches.
//!
//! Every example in a batch builds its own graph so the batch can run across
//! threads; gradients are averaged and applied sequentially in batch order,
//! which keeps a fixed seed bit-reproducible regardless of thread count.

use morphguard_tensor::{AdamConfig, AdamState, BnBatchStats, Graph};
use rayon::prelude::*;
use serde::Serialize;

use super::{cross_entropy, Mode, Model};
use crate::data::{augment_flip, balanced_batches, Dataset};
use crate::error::{CoreError, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial Adam learning rate.
    pub lr: f64,
    /// Epochs at which the learning rate halves.
    pub decay_epochs: Vec<usize>,
    pub seed: u64,
    /// Random horizontal flips.
    pub augment: bool,
    /// Force every batch to an exact class balance.
    pub strict_balance: bool,
    /// Momentum for folding batch statistics into running statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 5e-5,
            decay_epochs: Vec::new(),
            seed: 0,
            augment: true,
            strict_balance: false,
            bn_momentum: 0.1,
        }
    }
}

/// One row of the training trace. Loss and accuracy are measured on the
/// training batches as seen (after augmentation, before that batch's update).
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

struct ExampleOut {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Vec<f64>>>,
    bn_stats: Vec<BnBatchStats>,
}

fn run_example(
    model: &Model,
    ds: &Dataset,
    idx: usize,
    epoch: usize,
    pos_in_epoch: usize,
    cfg: &TrainConfig,
) -> Result<ExampleOut> {
    let (h, w) = (ds.height(), ds.width());
    let mut img = ds.image(idx).to_vec();
    if cfg.augment {
        let tag = ((epoch as u64) << 32) | pos_in_epoch as u64;
        let mut ar = rng::stream(cfg.seed, "augment", tag);
        img = augment_flip(&img, 3, h, w, &mut ar);
    }
    let y = ds.label(idx) as usize;
    let mut g = Graph::new();
    let x = g.constant(&[3, h, w], img)?;
    let fwd = model.forward(&mut g, x, Mode::Train)?;
    let loss = cross_entropy(&mut g, fwd.logits, y)?;
    g.backward(loss)?;
    let lv = g.value(fwd.logits);
    let pred = usize::from(lv[1] > lv[0]);
    let grads = fwd.param_ids.iter().map(|&pid| g.grad(pid).map(<[f64]>::to_vec)).collect();
    Ok(ExampleOut { loss: g.scalar_value(loss), correct: pred == y, grads, bn_stats: fwd.bn_stats })
}

/// Train `model` on the dataset rows named by `indices`. Returns one stats
/// row per epoch.
pub fn train_model(
    model: &mut Model,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if indices.is_empty() {
        return Err(CoreError::contract("train_model", "no training examples selected"));
    }
    if indices.iter().any(|&i| i >= ds.n()) {
        return Err(CoreError::contract("train_model", "index out of range"));
    }
    let labels = ds.labels();
    if indices.iter().all(|&i| labels[i] == labels[indices[0]]) {
        return Err(CoreError::SingleClass("train_model"));
    }
    if ds.height() != model.image_size() || ds.width() != model.image_size() {
        return Err(CoreError::contract(
            "train_model",
            format!(
                "dataset images are {}x{} but the model expects {}",
                ds.height(),
                ds.width(),
                model.image_size()
            ),
        ));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(CoreError::contract("train_model", "learning rate must be >= 0"));
    }
    if !(0.0..=1.0).contains(&cfg.bn_momentum) {
        return Err(CoreError::contract("train_model", "bn momentum must be in [0, 1]"));
    }

    let mut adam: Vec<AdamState> =
        model.params().iter().map(|(_, t)| AdamState::new(t.numel())).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut br = rng::stream(cfg.seed, "batches", epoch as u64);
        let batches = balanced_batches(labels, indices, cfg.batch_size, cfg.strict_balance, &mut br)?;
        let lr = morphguard_tensor::decayed_lr(cfg.lr, epoch, &cfg.decay_epochs, 0.5);
        let adam_cfg = AdamConfig { lr, ..AdamConfig::default() };

        let mut loss_sum = 0.0;
        let mut n_correct = 0usize;
        let mut n_seen = 0usize;

        for batch in &batches {
            let shared: &Model = model;
            let outs: Vec<ExampleOut> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| run_example(shared, ds, idx, epoch, n_seen + j, cfg))
                .collect::<Result<_>>()?;

            let scale = 1.0 / batch.len() as f64;
            for ((pi, (_, t)), st) in model.params_mut().iter_mut().enumerate().zip(&mut adam) {
                if !t.requires_grad {
                    continue;
                }
                let mut mean = vec![0.0; t.numel()];
                let mut seen = false;
                for out in &outs {
                    if let Some(gv) = &out.grads[pi] {
                        for (m, v) in mean.iter_mut().zip(gv) {
                            *m += v * scale;
                        }
                        seen = true;
                    }
                }
                if seen {
                    t.accumulate_grad(&mean)?;
                    st.step(t, &adam_cfg);
                    t.zero_grad();
                }
            }

            for out in &outs {
                loss_sum += out.loss;
                n_correct += usize::from(out.correct);
            }
            n_seen += batch.len();

            let stats: Vec<Vec<BnBatchStats>> = outs.into_iter().map(|o| o.bn_stats).collect();
            model.fold_bn_stats(&stats, cfg.bn_momentum);
        }

        trace.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n_seen as f64,
            accuracy: n_correct as f64 / n_seen as f64,
        });
    }
    Ok(trace)
}
