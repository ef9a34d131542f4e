//! Supervised training of the victim on a labelled toy set.

use super::vit::{cross_entropy, predict, vit_forward, VitConfig, VitParams};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 16, lr: 3e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Adam with cosine decay over all steps, from a seeded initialisation.
pub fn train_victim(
    config: &VitConfig,
    images: &Tensor,
    labels: &[usize],
    train: &TrainConfig,
) -> Result<(VitParams, TrainReport)> {
    let m = images.shape().first().copied().unwrap_or(0);
    if m == 0 || labels.len() != m {
        return Err(Error::contract("training needs a non-empty dataset with one label per image"));
    }
    if train.batch_size == 0 || train.epochs == 0 {
        return Err(Error::contract("epochs and batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut params = VitParams::init(config, &mut rng)?;
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let per = images.len() / m;
    let steps_per_epoch = m.div_ceil(train.batch_size);
    let total = train.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..m).collect();
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
            }
            let xb = Tensor::new(config.image_shape(chunk.len()), data)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let p = params.leaves(&tape);
            let loss = cross_entropy(vit_forward(config, &p, tape.constant(xb))?, &yb)?;
            tape.backward(loss)?;
            sum += loss.item() * chunk.len() as f64;
            let grads: Vec<Tensor> = p
                .iter()
                .zip(&params.tensors)
                .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            let mut current: Vec<Tensor> = params.tensors.iter().map(|t| (**t).clone()).collect();
            adam.step(&mut current, &grads, cosine_lr(train.lr, step, total));
            params.tensors = current.into_iter().map(Arc::new).collect();
            step += 1;
        }
        epoch_loss.push(sum / m as f64);
    }
    let train_accuracy = accuracy(&params, images, labels)?;
    Ok((params, TrainReport { epoch_loss, train_accuracy }))
}

/// Fraction of images whose arg-max logit equals the label.
pub fn accuracy(params: &VitParams, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = predict(params, images)?;
    let k = params.config.num_classes;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            best == y
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
