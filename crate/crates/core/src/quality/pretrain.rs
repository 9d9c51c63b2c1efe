//! Backbone pretraining on a synthetic degradation-classification task.
//!
//! Each example is a synthetic scene blurred to one of `BLUR_LEVELS` and
//! corrupted at one of `NOISE_LEVELS`; two classification heads learn to name
//! both levels.
//! The result is saved like any other backbone and can then be handed to
//! quality training as a pretrained source.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::model::{normalized_input, Normalization};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, Layer, Linear, NormMode, Param, Tensor};
use crate::synthetic::{add_gaussian_noise, scene};

/// Gaussian blur standard deviations, in pixels.
pub const BLUR_LEVELS: [f32; 5] = [0.0, 0.5, 1.0, 1.5, 2.5];
/// Additive noise standard deviations, on the `[0, 1]` scale.
pub const NOISE_LEVELS: [f32; 5] = [0.0, 3.0 / 255.0, 6.0 / 255.0, 12.0 / 255.0, 24.0 / 255.0];
const CLASSES: usize = BLUR_LEVELS.len() * NOISE_LEVELS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub backbone: BackboneConfig,
    /// Side of the square training scenes.
    pub image_size: usize,
    pub epochs: usize,
    /// Fresh scenes generated for every epoch.
    pub images_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig { width_multiplier: 0.25 },
            image_size: 56,
            epochs: 24,
            images_per_epoch: 1024,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// A degraded scene of class `class` (blur-major order).
pub fn degraded_scene(size: usize, class: usize, seed: u64) -> Result<Image> {
    let (blur, noise) = (BLUR_LEVELS[class / NOISE_LEVELS.len()], NOISE_LEVELS[class % NOISE_LEVELS.len()]);
    let clean = scene(size, size, seed)?.blur(blur);
    Ok(add_gaussian_noise(&clean, noise, seed.wrapping_add(1))?.quantized())
}

fn example(options: &PretrainOptions, class: usize, seed: u64, norm: &Normalization) -> Result<Tensor> {
    Ok(normalized_input(&degraded_scene(options.image_size, class, seed)?, norm))
}

/// Mean cross-entropy of `logits` against `labels`, its logit gradient, and the hit count.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor, usize) {
    let k = logits.shape.c;
    let n = labels.len();
    let mut grad = Tensor::zeros(logits.shape);
    let (mut loss, mut hits) = (0.0, 0);
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data[i * k..(i + 1) * k];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
        let exps: Vec<f64> = row.iter().map(|z| f64::from(z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (exps[label] / sum).ln();
        let argmax = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        hits += usize::from(argmax == label);
        for j in 0..k {
            let target = if j == label { 1.0 } else { 0.0 };
            grad.data[i * k + j] = ((exps[j] / sum - target) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad, hits)
}

/// Summed cross-entropy of the blur and noise heads (the two halves of `logits`).
/// Hits count examples with both levels right.
fn degradation_loss(logits: &Tensor, classes: &[usize]) -> (f64, Tensor, usize) {
    let (b, m) = (BLUR_LEVELS.len(), NOISE_LEVELS.len());
    let (blur, noise) = logits.split_channels(b);
    let blur_labels: Vec<usize> = classes.iter().map(|c| c / m).collect();
    let noise_labels: Vec<usize> = classes.iter().map(|c| c % m).collect();
    let (lb, gb, _) = cross_entropy(&blur, &blur_labels);
    let (ln, gn, _) = cross_entropy(&noise, &noise_labels);
    let hits = (0..classes.len())
        .filter(|&i| {
            let best = |t: &Tensor, k: usize| (0..k).fold(0, |a, j| if t.data[i * k + j] > t.data[i * k + a] { j } else { a });
            best(&blur, b) == blur_labels[i] && best(&noise, m) == noise_labels[i]
        })
        .count();
    (lb + ln, Tensor::concat_channels(&gb, &gn), hits)
}

/// Trains every backbone layer on the degradation task, then freezes batch-norm statistics.
pub fn pretrain_backbone(options: &PretrainOptions, on_epoch: &mut dyn FnMut(&PretrainLog)) -> Result<Backbone> {
    if options.batch_size < 2 || options.images_per_epoch == 0 || options.image_size < 32 {
        return Err(Error::InvalidConfig {
            field: "pretrain",
            reason: format!(
                "batch {} (need 2+), images {} (need 1+), size {} (need 32+)",
                options.batch_size, options.images_per_epoch, options.image_size
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut backbone = Backbone::new(options.backbone, &mut rng);
    let mut head = Linear::new(options.backbone.feature_channels(), BLUR_LEVELS.len() + NOISE_LEVELS.len(), &mut rng);
    let norm = Normalization::default();
    backbone.set_norm_mode(NormMode::Batch);
    let mut adam = Adam::new(options.learning_rate);

    for epoch in 1..=options.epochs {
        let mut jobs: Vec<(usize, u64)> = (0..options.images_per_epoch)
            .map(|i| (i % CLASSES, rng.random()))
            .collect();
        jobs.shuffle(&mut rng);
        let (mut total, mut hits, mut seen) = (0.0, 0, 0);
        for chunk in jobs.chunks(options.batch_size).filter(|c| c.len() > 1) {
            let inputs = chunk
                .iter()
                .map(|(class, seed)| example(options, *class, *seed, &norm))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = chunk.iter().map(|(c, _)| *c).collect();
            let features = backbone.forward_all(Tensor::stack(&inputs));
            let logits = head.forward(features);
            let (loss, grad, h) = degradation_loss(&logits, &labels);
            for p in head.params_mut() {
                p.zero_grad();
            }
            for p in backbone.params_mut() {
                p.zero_grad();
            }
            backbone.backward_all(head.backward(grad));
            let mut params: Vec<&mut Param> = head.params_mut();
            params.extend(backbone.params_mut());
            adam.step(&mut params);
            total += loss * labels.len() as f64;
            hits += h;
            seen += labels.len();
        }
        on_epoch(&PretrainLog {
            epoch,
            loss: total / seen as f64,
            accuracy: hits as f64 / seen as f64,
        });
    }

    backbone.clear_cache();
    backbone.set_norm_mode(NormMode::Frozen);
    let calibration = (0..4 * CLASSES)
        .map(|i| example(options, i % CLASSES, rng.random(), &norm))
        .collect::<Result<Vec<_>>>()?;
    backbone.calibrate(Tensor::stack(&calibration));
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = Tensor::from_vec(Shape::new(2, 3, 1, 1), vec![0.2, -0.4, 1.0, 0.3, 0.3, -0.1]);
        let labels = [2, 0];
        let (_, g, _) = cross_entropy(&logits, &labels);
        for i in 0..6 {
            let h = 1e-3;
            let mut up = logits.clone();
            up.data[i] += h;
            let mut dn = logits.clone();
            dn.data[i] -= h;
            let num = (cross_entropy(&up, &labels).0 - cross_entropy(&dn, &labels).0) / (2.0 * f64::from(h));
            assert!((num - f64::from(g.data[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn short_pretraining_learns_something() {
        let options = PretrainOptions {
            backbone: BackboneConfig { width_multiplier: 0.125 },
            image_size: 32,
            epochs: 3,
            images_per_epoch: 200,
            batch_size: 25,
            learning_rate: 0.003,
            seed: 1,
        };
        let mut logs = Vec::new();
        let bb = pretrain_backbone(&options, &mut |l| logs.push(*l)).unwrap();
        assert_eq!(logs.len(), 3);
        assert!(logs[2].loss < logs[0].loss, "{logs:?}");
        assert!(bb.blocks.iter().all(|b| b.pointwise.norm.mode == NormMode::Frozen));
    }
}
