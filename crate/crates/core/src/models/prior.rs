//! Batch-norm CNN whose stored running statistics serve as the image prior.

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Native input resolution; other sizes are resampled nearest-neighbour.
    pub image_size: usize,
    pub channels: usize,
    /// Output channels of each conv-BN-ReLU block.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub num_classes: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { image_size: 16, channels: 1, widths: vec![8, 16, 16], strides: vec![1, 2, 2], num_classes: 8 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::contract("prior widths and strides must be non-empty and equally long"));
        }
        if self.image_size == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(Error::contract("prior dimensions must be positive"));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::contract("prior widths and strides must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Per-BN-layer running mean and variance, in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStats {
    pub mean: Vec<Tensor>,
    pub var: Vec<Tensor>,
}

impl PriorStats {
    pub fn layers(&self) -> usize {
        self.mean.len()
    }
}

/// Trainable weights: per block a bias-free 3x3 conv plus BN affine, then a
/// linear head on globally pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorCnn {
    pub config: PriorConfig,
    /// Ordered `[conv_0, gamma_0, beta_0, conv_1, ..., head_w, head_b]`.
    pub params: Vec<Arc<Tensor>>,
    pub stats: PriorStats,
}

/// Batch statistics of one BN layer's input.
pub struct LayerStats<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

/// How batch norm normalises during a forward pass.
#[derive(Clone, Copy, PartialEq, Eq)]
enum BnMode {
    Batch,
    Running,
}

impl PriorCnn {
    pub fn init<R: Rng + ?Sized>(config: &PriorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut cin = config.channels;
        for &w in &config.widths {
            let fan_in = (9 * cin) as f64;
            let conv = Tensor::trunc_normal([3, 3, cin, w], (2.0 / fan_in).sqrt(), rng);
            params.push(Arc::new(conv));
            params.push(Arc::new(Tensor::ones([w])));
            params.push(Arc::new(Tensor::zeros([w])));
            cin = w;
        }
        let head = Tensor::trunc_normal([cin, config.num_classes], (1.0 / cin as f64).sqrt(), rng);
        params.push(Arc::new(head));
        params.push(Arc::new(Tensor::zeros([config.num_classes])));
        let stats = PriorStats {
            mean: config.widths.iter().map(|&w| Tensor::zeros([w])).collect(),
            var: config.widths.iter().map(|&w| Tensor::ones([w])).collect(),
        };
        Ok(Self { config: config.clone(), params, stats })
    }

    /// Shapes of the trainable tensors, in enumeration order.
    pub fn param_shapes(config: &PriorConfig) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = config.channels;
        for &w in &config.widths {
            shapes.push(vec![3, 3, cin, w]);
            shapes.push(vec![w]);
            shapes.push(vec![w]);
            cin = w;
        }
        shapes.push(vec![cin, config.num_classes]);
        shapes.push(vec![config.num_classes]);
        shapes
    }

    /// Reassembles a prior from stored tensors, checking every shape.
    pub fn from_parts(config: PriorConfig, params: Vec<Tensor>, stats: PriorStats) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config);
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(t, s)| t.shape() != &s[..]) {
            return Err(Error::contract("prior tensors do not match the config"));
        }
        let ok = stats.mean.len() == config.widths.len()
            && stats.var.len() == config.widths.len()
            && config
                .widths
                .iter()
                .enumerate()
                .all(|(l, &w)| stats.mean[l].shape() == [w] && stats.var[l].shape() == [w]);
        if !ok {
            return Err(Error::contract("prior statistics do not match the config"));
        }
        Ok(Self { config, params: params.into_iter().map(Arc::new).collect(), stats })
    }

    pub fn param_names(&self) -> Vec<String> {
        Self::names_for(&self.config)
    }

    pub fn names_for(config: &PriorConfig) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..config.widths.len() {
            names.push(format!("prior/blocks/{l}/conv/weight"));
            names.push(format!("prior/blocks/{l}/bn/weight"));
            names.push(format!("prior/blocks/{l}/bn/bias"));
        }
        names.push("prior/head/weight".into());
        names.push("prior/head/bias".into());
        names
    }

    fn resize<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.config.channels {
            return Err(Error::contract(format!(
                "prior input must be NHWC with {} channels, got {s:?}",
                self.config.channels
            )));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let size = self.config.image_size;
        if h == size && w == size {
            return Ok(x);
        }
        let mut idx = Vec::with_capacity(n * size * size * c);
        for b in 0..n {
            for y in 0..size {
                let sy = y * h / size;
                for xx in 0..size {
                    let sx = xx * w / size;
                    for ch in 0..c {
                        idx.push(((b * h + sy) * w + sx) * c + ch);
                    }
                }
            }
        }
        x.gather(Arc::new(idx), &[n, size, size, c])
    }

    /// Runs the conv stack. Returns the pooled features and the batch
    /// statistics of every BN input.
    fn run<'t>(&self, p: &[Var<'t>], x: Var<'t>, mode: BnMode) -> Result<(Var<'t>, Vec<LayerStats<'t>>)> {
        if x.shape().first() == Some(&0) {
            return Err(Error::contract("empty batch"));
        }
        let tape = x.tape();
        let mut h = self.resize(x)?;
        let mut stats = Vec::with_capacity(self.config.widths.len());
        for (l, &stride) in self.config.strides.iter().enumerate() {
            let pre = h.conv2d(p[3 * l], stride, 1)?;
            let (mean, var) = pre.batch_stats()?;
            let (m, v) = match mode {
                BnMode::Batch => (mean, var),
                BnMode::Running => (
                    tape.constant(self.stats.mean[l].clone()),
                    tape.constant(self.stats.var[l].clone()),
                ),
            };
            let normed = pre.sub(m)?.div(v.add_scalar(BATCH_NORM_EPS)?.sqrt()?)?;
            h = normed.mul(p[3 * l + 1])?.add(p[3 * l + 2])?.relu()?;
            stats.push(LayerStats { mean, var });
        }
        let pooled = h.mean(&[1, 2], false)?;
        Ok((pooled, stats))
    }

    /// Per-layer batch mean and variance of the BN inputs, normalising with
    /// batch statistics as in training. Differentiable with respect to `x`.
    pub fn forward_stats<'t>(&self, x: Var<'t>) -> Result<Vec<LayerStats<'t>>> {
        let p: Vec<Var<'t>> = self.params.iter().map(|t| x.tape().constant_arc(Arc::clone(t))).collect();
        Ok(self.run(&p, x, BnMode::Batch)?.1)
    }

    /// Penultimate (pooled) features with BN in inference mode, so each
    /// image's embedding is independent of the rest of the batch.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.constant_arc(Arc::clone(t))).collect();
        let (pooled, _) = self.run(&p, tape.constant(x.clone()), BnMode::Running)?;
        Ok((*pooled.value()).clone())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.constant_arc(Arc::clone(t))).collect();
        let (pooled, _) = self.run(&p, tape.constant(x.clone()), BnMode::Running)?;
        let k = p.len();
        Ok((*pooled.matmul(p[k - 2])?.add(p[k - 1])?.value()).clone())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Classification pretraining on labelled toy images `[M, H, W, C]`.
/// Running statistics follow an exponential moving average with momentum
/// [`BN_MOMENTUM`] during training. A last pass with the final weights then
/// replaces them by the average batch statistics over the dataset, since
/// the moving average lags weights that are still changing quickly.
pub fn pretrain_prior(
    config: &PriorConfig,
    images: &Tensor,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(PriorCnn, PretrainReport)> {
    let m = images.shape().first().copied().unwrap_or(0);
    if m == 0 || labels.is_empty() {
        return Err(Error::contract("prior pretraining needs a non-empty dataset"));
    }
    if labels.len() != m {
        return Err(Error::contract("image and label counts differ"));
    }
    if labels.iter().any(|&y| y >= config.num_classes) {
        return Err(Error::contract("label out of range for the prior head"));
    }
    let batch_size = batch_size.clamp(2, m.max(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prior = PriorCnn::init(config, &mut rng)?;
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let mut order: Vec<usize> = (0..m).collect();
    let mut epoch_loss = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = gather(images, chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let tape = Tape::new();
            let p: Vec<Var> = prior.params.iter().map(|t| tape.leaf_arc(Arc::clone(t))).collect();
            let (pooled, stats) = prior.run(&p, tape.constant(xb), BnMode::Batch)?;
            let k = p.len();
            let logits = pooled.matmul(p[k - 2])?.add(p[k - 1])?;
            let loss = crate::models::cross_entropy(logits, &yb)?;
            tape.backward(loss)?;
            total += loss.item();
            batches += 1;
            let grads: Vec<Tensor> = p.iter().map(|v| v.grad().expect("every prior param is used")).collect();
            let mut current: Vec<Tensor> = prior.params.iter().map(|t| (**t).clone()).collect();
            adam.step(&mut current, &grads, 1e-2);
            prior.params = current.into_iter().map(Arc::new).collect();
            for (l, s) in stats.iter().enumerate() {
                let bm = s.mean.value();
                let bv = s.var.value();
                prior.stats.mean[l] = ema(&prior.stats.mean[l], &bm);
                prior.stats.var[l] = ema(&prior.stats.var[l], &bv);
            }
        }
        epoch_loss.push(total / batches.max(1) as f64);
    }
    if epochs > 0 {
        prior.stats = population_stats(&prior, images, batch_size)?;
    }
    Ok((prior, PretrainReport { epoch_loss }))
}

fn gather(images: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let sample = images.len() / images.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * sample);
    for &i in rows {
        data.extend_from_slice(&images.data()[i * sample..(i + 1) * sample]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

/// Mean over dataset batches (in index order) of each layer's batch mean
/// and batch variance.
fn population_stats(prior: &PriorCnn, images: &Tensor, batch_size: usize) -> Result<PriorStats> {
    let m = images.shape()[0];
    let order: Vec<usize> = (0..m).collect();
    let mut sums: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size).filter(|c| c.len() >= 2) {
        let tape = Tape::new();
        let stats = prior.forward_stats(tape.constant(gather(images, chunk)?))?;
        let (mean, var): (Vec<Tensor>, Vec<Tensor>) = stats.iter().map(|s| ((*s.mean.value()).clone(), (*s.var.value()).clone())).unzip();
        sums = Some(match sums {
            None => (mean, var),
            Some((sm, sv)) => (
                sm.iter().zip(&mean).map(|(a, b)| a.add(b)).collect::<Result<_>>()?,
                sv.iter().zip(&var).map(|(a, b)| a.add(b)).collect::<Result<_>>()?,
            ),
        });
        batches += 1;
    }
    let (sm, sv) = sums.ok_or_else(|| Error::contract("prior pretraining needs at least two images"))?;
    let k = 1.0 / batches as f64;
    Ok(PriorStats { mean: sm.iter().map(|t| t.scale(k)).collect(), var: sv.iter().map(|t| t.scale(k)).collect() })
}

fn ema(running: &Tensor, batch: &Tensor) -> Tensor {
    running
        .zip_with(batch, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
        .expect("stat shapes agree")
}
