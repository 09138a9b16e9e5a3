use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decision::DefectClass;
use crate::error::{Error, Result};
use crate::preprocess::{FusedInput, FusionGroup};

use super::{forward, ModelParams, TrainingMeta};

/// Examples per gradient chunk. Chunks are reduced in a fixed order, so
/// results do not depend on the worker count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Largest L2 norm of a batch-mean gradient; longer ones are scaled
    /// down to it.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            momentum: 0.9,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: FusedInput,
    pub label: DefectClass,
}

/// Mini-batch SGD with momentum on softmax cross-entropy.
///
/// Starts from `warm_start` when given, otherwise from a fresh
/// initialization seeded with `config.seed`. `on_epoch` receives the epoch
/// index and its mean training loss.
pub fn train(
    group: FusionGroup,
    dataset: &[TrainingExample],
    config: &TrainConfig,
    warm_start: Option<&ModelParams>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ModelParams> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "batch size {} / learning rate {} must be positive",
            config.batch_size, config.learning_rate
        )));
    }
    let mut model = match warm_start {
        Some(m) if m.group != group => {
            return Err(Error::ShapeMismatch(format!(
                "warm start model is {}, training {group}",
                m.group
            )))
        }
        Some(m) => m.clone(),
        None => ModelParams::init(group, config.seed)?,
    };
    let labels: Vec<usize> = dataset
        .iter()
        .map(|ex| {
            if ex.input.group != group {
                return Err(Error::ShapeMismatch(format!(
                    "{} example in {group} dataset",
                    ex.input.group
                )));
            }
            model
                .class_index(ex.label)
                .ok_or_else(|| Error::LabelOutsideClassSet {
                    group: group.id(),
                    label: ex.label.to_string(),
                })
        })
        .collect::<Result<_>>()?;
    let t = *model.network.topology();
    if let Some(bad) = dataset
        .iter()
        .find(|ex| ex.input.planes.len() != t.input_len())
    {
        return Err(Error::ShapeMismatch(format!(
            "example has {} values, topology expects {}",
            bad.input.planes.len(),
            t.input_len()
        )));
    }

    let n_params = t.param_count();
    let mut velocity = vec![0.0f32; n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let net = &model.network;
            let partials: Vec<Result<(Vec<f32>, f64)>> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grads = vec![0.0f32; n_params];
                    let mut loss = 0.0;
                    for &i in chunk {
                        let input = &dataset[i].input.planes;
                        let cache = net.forward_cached(input)?;
                        loss += net.backward(input, &cache, labels[i], &mut grads);
                    }
                    Ok((grads, loss))
                })
                .collect();
            let mut total = vec![0.0f32; n_params];
            for partial in partials {
                let (grads, loss) = partial?;
                loss_sum += loss;
                for (t, g) in total.iter_mut().zip(&grads) {
                    *t += g;
                }
            }
            let mut scale = config.learning_rate as f32 / batch.len() as f32;
            if let Some(max) = config.clip_norm {
                let norm = total
                    .iter()
                    .map(|g| f64::from(*g).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / batch.len() as f64;
                if norm > max {
                    scale *= (max / norm) as f32;
                }
            }
            let momentum = config.momentum as f32;
            for ((p, v), g) in model
                .network
                .params_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&total)
            {
                *v = momentum * *v - scale * g;
                *p += *v;
            }
        }
        if model.network.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters after training epoch"));
        }
        let mean = loss_sum / dataset.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }

    let prior = warm_start.map(|m| m.training.epochs).unwrap_or(0);
    model.training = TrainingMeta {
        seed: config.seed,
        epochs: prior + config.epochs,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        momentum: config.momentum,
        examples: dataset.len(),
        final_loss: epoch_losses.last().copied(),
        epoch_losses,
    };
    Ok(model)
}

/// Mean cross-entropy of `model` over `examples`.
pub fn mean_loss(model: &ModelParams, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let label = model
                .class_index(ex.label)
                .ok_or_else(|| Error::LabelOutsideClassSet {
                    group: model.group.id(),
                    label: ex.label.to_string(),
                })?;
            model.network.loss(&ex.input.planes, label)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

/// Fraction of `examples` whose top class equals the label.
pub fn accuracy(model: &ModelParams, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits: usize = examples
        .par_iter()
        .map(|ex| forward(model, &ex.input).map(|v| usize::from(v.top_class == ex.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / examples.len() as f64)
}
