//! Minibatch SGD with momentum over class-weighted cross-entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::weighted_cross_entropy;
use super::net::{Architecture, LayerParams, NetworkParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub enum ClassWeightMode {
    Off,
    /// Weights `N / (2 N_c)` from the global class pixel counts.
    #[default]
    InverseFrequency,
    /// `fixedWeights` as `[background, lv]`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub class_weight_mode: ClassWeightMode,
    pub fixed_weights: [f64; 2],
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch: 8,
            seed: 0,
            class_weight_mode: ClassWeightMode::InverseFrequency,
            fixed_weights: [1.0, 1.0],
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::param("epochs/batch", "must be positive"));
        }
        if self.class_weight_mode == ClassWeightMode::Fixed && self.fixed_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::param("fixedWeights", "must be positive"));
        }
        Ok(())
    }
}

/// One training pair: a single-channel input and its target mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub target: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub class_weights: [f64; 2],
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Minibatch loss before each update.
    pub iteration_losses: Vec<f64>,
}

/// Class weights for the chosen mode.
pub fn class_weights(samples: &[Sample], cfg: &TrainConfig) -> [f64; 2] {
    match cfg.class_weight_mode {
        ClassWeightMode::Off => [1.0, 1.0],
        ClassWeightMode::Fixed => cfg.fixed_weights,
        ClassWeightMode::InverseFrequency => {
            let (mut fg, mut total) = (0u64, 0u64);
            for s in samples {
                fg += s.target.count() as u64;
                total += s.target.data().len() as u64;
            }
            let bg = total - fg;
            let w = |n: u64| if n == 0 { 1.0 } else { total as f64 / (2.0 * n as f64) };
            [w(bg), w(fg)]
        }
    }
}

fn sample_gradient(
    params: &NetworkParams,
    sample: &Sample,
    flip: bool,
    weights: [f64; 2],
) -> Result<(f64, Vec<LayerParams>)> {
    let flipped;
    let (input, target) = if flip {
        let t = &sample.target;
        flipped = (
            sample.input.flip_horizontal(),
            BinaryMask::from_fn(t.height(), t.width(), |r, c| t.get(r, t.width() - 1 - c)),
        );
        (&flipped.0, &flipped.1)
    } else {
        (&sample.input, &sample.target)
    };
    let cache = params.forward(input)?;
    let (loss, grad) = weighted_cross_entropy(cache.logits(), target, weights)?;
    let (grads, _) = params.backward(&cache, &grad)?;
    Ok((loss, grads))
}

/// Trains a freshly initialized network.
///
/// Initialization, shuffling and flips all draw from one ChaCha stream seeded
/// by `cfg.seed`, and per-sample gradients are summed in sample order, so a
/// run is bit-reproducible.
pub fn train(samples: &[Sample], architecture: Architecture, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetworkParams::init_with(architecture, &mut rng);
    let weights = class_weights(samples, cfg);
    let mut velocity = params.zero_grads();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut iteration_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let flips: Vec<bool> = chunk.iter().map(|_| cfg.hflip && rng.random::<bool>()).collect();
            let results = chunk
                .par_iter()
                .zip(flips.par_iter())
                .map(|(&i, &flip)| sample_gradient(&params, &samples[i], flip, weights))
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut total = params.zero_grads();
            for (l, g) in &results {
                loss += l;
                for (t, gl) in total.iter_mut().zip(g) {
                    t.weights.iter_mut().zip(&gl.weights).for_each(|(a, b)| *a += b);
                    t.bias.iter_mut().zip(&gl.bias).for_each(|(a, b)| *a += b);
                }
            }
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::InvalidData(format!("training diverged at epoch {epoch}")));
            }
            for ((p, v), g) in params.layers.iter_mut().zip(&mut velocity).zip(&total) {
                for ((w, vw), gw) in p.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                    *vw = cfg.momentum * *vw - cfg.lr * gw * scale;
                    *w += *vw;
                }
                for ((b, vb), gb) in p.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                    *vb = cfg.momentum * *vb - cfg.lr * gb * scale;
                    *b += *vb;
                }
            }
            iteration_losses.push(loss);
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::info!("epoch {:>3}: loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        params,
        class_weights: weights,
        epoch_losses,
        iteration_losses,
    })
}
