//! Two-stage transfer training of the quality network with the EMD loss.
//!
//! Stage 1 trains only the head on top of the frozen backbone. Stage 2
//! additionally unfreezes the last separable block; everything below it
//! stays bit-identical throughout.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::distribution::{emd_from_probs, emd_grad, ScoreDistribution, BINS};
use super::model::{load_backbone, normalized_input, softmax, BiqanModel, Normalization};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, Layer, Param, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f32,
    pub input_resize: usize,
    pub train_crop: usize,
    pub horizontal_flip: bool,
    pub batch_size: usize,
    /// Fraction of source images held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 20,
            learning_rate: 0.001,
            input_resize: 256,
            train_crop: 224,
            horizontal_flip: true,
            batch_size: 32,
            validation_fraction: 0.1,
        }
    }
}

/// One labeled snapshot.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub source_id: String,
    pub image: Image,
    pub target: ScoreDistribution,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingCorpus {
    pub id: String,
    pub min_psnr: f64,
    pub max_psnr: f64,
    pub examples: Vec<TrainingExample>,
}

pub enum BackboneSource {
    /// Weights written by [`super::save_backbone`] (e.g. converted ImageNet weights).
    Pretrained(PathBuf),
    /// Seeded random weights with batch-norm statistics calibrated on the corpus.
    Random { config: BackboneConfig, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Splits source ids into `(train, validation)`, keeping each source on one side.
pub fn split_by_source(ids: &[&str], fraction: f64, seed: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut unique: Vec<String> = ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    unique.shuffle(&mut rng);
    let held = if unique.len() < 2 || fraction <= 0.0 {
        0
    } else {
        ((unique.len() as f64 * fraction).ceil() as usize).clamp(1, unique.len() - 1)
    };
    let val = unique[..held].iter().cloned().collect();
    let train = unique[held..].iter().cloned().collect();
    (train, val)
}

struct Prepared<'a> {
    resized: Image,
    target: &'a ScoreDistribution,
}

fn batch_loss_and_grad(logits: &Tensor, targets: &[&ScoreDistribution]) -> (f64, Tensor) {
    let n = targets.len();
    let mut grad = Tensor::zeros(logits.shape);
    let mut total = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let row = &logits.data[i * BINS..(i + 1) * BINS];
        let p = *softmax(row).probs();
        total += emd_from_probs(target.probs(), &p);
        let g = emd_grad(target.probs(), &p);
        let dot: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        for k in 0..BINS {
            grad.data[i * BINS + k] = (p[k] * (g[k] - dot) / n as f64) as f32;
        }
    }
    (total / n as f64, grad)
}

fn resolve_backbone(
    source: &BackboneSource,
    calibration: impl FnOnce(&Backbone) -> Result<Tensor>,
) -> Result<(Backbone, String)> {
    match source {
        BackboneSource::Pretrained(path) => Ok((load_backbone(path)?, path.display().to_string())),
        BackboneSource::Random { config, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut backbone = Backbone::new(*config, &mut rng);
            let batch = calibration(&backbone)?;
            backbone.calibrate(batch);
            Ok((backbone, format!("random:{seed}")))
        }
    }
}

/// Trains a quality model on `corpus`. `on_epoch` sees the model after every epoch.
pub fn train_biqan(
    corpus: &TrainingCorpus,
    schedule: &TrainSchedule,
    backbone: &BackboneSource,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog, &BiqanModel),
) -> Result<BiqanModel> {
    if corpus.examples.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if schedule.batch_size == 0 || schedule.train_crop == 0 || schedule.train_crop > schedule.input_resize {
        return Err(Error::InvalidConfig {
            field: "schedule",
            reason: format!(
                "batch {} crop {} resize {}",
                schedule.batch_size, schedule.train_crop, schedule.input_resize
            ),
        });
    }
    let ids: Vec<&str> = corpus.examples.iter().map(|e| e.source_id.as_str()).collect();
    let (_, val_ids) = split_by_source(&ids, schedule.validation_fraction, seed);

    let mut prepared_train = Vec::new();
    let mut prepared_val = Vec::new();
    for e in &corpus.examples {
        let p = Prepared {
            resized: e.image.resize(schedule.input_resize, schedule.input_resize)?,
            target: &e.target,
        };
        if val_ids.contains(&e.source_id) {
            prepared_val.push(p);
        } else {
            prepared_train.push(p);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(13);
    let mut order: Vec<usize> = (0..prepared_train.len()).collect();
    order.shuffle(&mut rng);

    let crop = schedule.train_crop;
    let (backbone, source_name) = resolve_backbone(backbone, |_| {
        let norm = Normalization::default();
        let items: Vec<Tensor> = order
            .iter()
            .take(schedule.batch_size)
            .map(|i| Ok(normalized_input(&prepared_train[*i].resized.center_crop(crop, crop)?, &norm)))
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&items))
    })?;

    let mut model = BiqanModel::new(backbone, source_name, seed);
    model.metadata.input_resize = schedule.input_resize;
    model.metadata.input_crop = crop;
    model.metadata.corpus_id = Some(corpus.id.clone());
    model.metadata.min_psnr = Some(corpus.min_psnr);
    model.metadata.max_psnr = Some(corpus.max_psnr);
    model.metadata.schedule = Some(schedule.clone());

    for stage in [1u8, 2] {
        let epochs = if stage == 1 {
            schedule.stage1_epochs
        } else {
            schedule.stage2_epochs
        };
        let mut adam = Adam::new(schedule.learning_rate);
        for epoch in 1..=epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(schedule.batch_size) {
                let mut inputs = Vec::with_capacity(chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let p = &prepared_train[i];
                    let span = schedule.input_resize - crop;
                    let (top, left) = (rng.random_range(0..=span), rng.random_range(0..=span));
                    let mut img = p.resized.crop(top, left, crop, crop)?;
                    if schedule.horizontal_flip && rng.random_bool(0.5) {
                        img = img.flip_horizontal();
                    }
                    inputs.push(model.input_tensor(&img));
                    targets.push(p.target);
                }
                let batch = Tensor::stack(&inputs);
                total += train_step(&mut model, &mut adam, stage, batch, &targets) * chunk.len() as f64;
            }
            let val_loss = if prepared_val.is_empty() {
                None
            } else {
                Some(validation_loss(&model, &prepared_val, schedule.batch_size)?)
            };
            let log = EpochLog {
                stage,
                epoch,
                train_loss: total / prepared_train.len() as f64,
                val_loss,
            };
            model.metadata.epochs.push(log.clone());
            on_epoch(&log, &model);
        }
    }
    model.backbone.clear_cache();
    model.head.clear_cache();
    Ok(model)
}

fn train_step(
    model: &mut BiqanModel,
    adam: &mut Adam,
    stage: u8,
    batch: Tensor,
    targets: &[&ScoreDistribution],
) -> f64 {
    let features = if stage == 1 {
        model.backbone.features(batch)
    } else {
        let prefix = model.backbone.frozen_prefix(batch);
        model.backbone.forward_tail(prefix)
    };
    for p in model.head.params_mut() {
        p.zero_grad();
    }
    let logits = model.head.forward(features);
    let (loss, grad) = batch_loss_and_grad(&logits, targets);
    let dfeat = model.head.backward(grad);
    if stage == 1 {
        adam.step(&mut model.head.params_mut());
    } else {
        for p in model.backbone.tail_params_mut() {
            p.zero_grad();
        }
        model.backbone.backward_tail(dfeat);
        let BiqanModel { backbone, head, .. } = model;
        let mut params: Vec<&mut Param> = head.params_mut();
        params.extend(backbone.tail_params_mut());
        adam.step(&mut params);
    }
    loss
}

fn validation_loss(model: &BiqanModel, val: &[Prepared<'_>], batch_size: usize) -> Result<f64> {
    let crop = model.metadata.input_crop;
    let mut total = 0.0;
    for chunk in val.chunks(batch_size) {
        let inputs: Vec<Tensor> = chunk
            .iter()
            .map(|p| Ok(model.input_tensor(&p.resized.center_crop(crop, crop)?)))
            .collect::<Result<_>>()?;
        let dists = model.distributions(Tensor::stack(&inputs));
        for (d, p) in dists.iter().zip(chunk) {
            total += emd_from_probs(p.target.probs(), d.probs());
        }
    }
    Ok(total / val.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;
    use crate::quality::distribution::mean_score;

    #[test]
    fn split_keeps_sources_together() {
        let ids = ["a", "a", "b", "c", "c", "d", "e", "f", "g", "h", "i", "j", "k"];
        let (train, val) = split_by_source(&ids, 0.1, 3);
        assert_eq!(val.len(), 2);
        assert_eq!(train.len() + val.len(), 11);
        assert!(train.is_disjoint(&val));
        let (train, val) = split_by_source(&["x", "x"], 0.1, 3);
        assert!(val.is_empty());
        assert_eq!(train.len(), 1);
    }

    #[test]
    fn logit_gradient_matches_finite_difference() {
        let t = ScoreDistribution::from_weights(&[1., 3., 5., 3., 1., 1., 1., 1., 1., 1.]).unwrap();
        let logits = Tensor::from_vec(Shape::new(1, BINS, 1, 1), (0..BINS).map(|i| (i as f32 * 0.37).sin()).collect());
        let (_, g) = batch_loss_and_grad(&logits, &[&t]);
        for k in 0..BINS {
            let h = 1e-3;
            let mut up = logits.clone();
            up.data[k] += h;
            let mut dn = logits.clone();
            dn.data[k] -= h;
            let num = (batch_loss_and_grad(&up, &[&t]).0 - batch_loss_and_grad(&dn, &[&t]).0) / (2.0 * f64::from(h));
            assert!((num - f64::from(g.data[k])).abs() < 1e-4, "{k}: {num} vs {}", g.data[k]);
        }
    }

    fn toy_corpus() -> TrainingCorpus {
        // Brightness stands in for quality: brighter images get higher targets.
        let examples = (0..24)
            .map(|i| {
                let level = (i % 8) as f32 / 8.0 + 0.05;
                let image = Image::from_fn(16, 16, |y, x| {
                    let t = ((x + y) % 3) as f32 * 0.02;
                    [level + t, level, level - t]
                })
                .unwrap();
                let mut w = [0.05; BINS];
                w[(i % 8) + 1] = 1.0;
                TrainingExample {
                    source_id: format!("src{}", i / 4),
                    image,
                    target: ScoreDistribution::from_weights(&w).unwrap(),
                    psnr: 20.0 + (i % 8) as f64,
                }
            })
            .collect();
        TrainingCorpus { id: "toy".into(), min_psnr: 20.0, max_psnr: 27.0, examples }
    }

    fn toy_schedule() -> TrainSchedule {
        TrainSchedule {
            stage1_epochs: 4,
            stage2_epochs: 2,
            learning_rate: 0.01,
            input_resize: 40,
            train_crop: 32,
            horizontal_flip: true,
            batch_size: 8,
            validation_fraction: 0.2,
        }
    }

    #[test]
    fn stage_one_reduces_loss_and_stage_two_keeps_prefix_frozen() {
        let corpus = toy_corpus();
        let source = BackboneSource::Random { config: BackboneConfig { width_multiplier: 0.125 }, seed: 1 };
        let mut logs = Vec::new();
        let mut prefix_snapshots = Vec::new();
        let mut tail_snapshots = Vec::new();
        let model = train_biqan(&corpus, &toy_schedule(), &source, 9, &mut |log, m| {
            logs.push(log.clone());
            prefix_snapshots.push(m.backbone.frozen_state());
            tail_snapshots.push(m.backbone.blocks.last().unwrap().state().concat());
        })
        .unwrap();
        assert_eq!(logs.len(), 6);
        assert!(logs[3].train_loss < logs[0].train_loss, "{logs:?}");
        assert!(logs.iter().all(|l| l.val_loss.is_some()));
        // Prefix never changes; the last block only moves in stage 2.
        assert!(prefix_snapshots.windows(2).all(|w| w[0] == w[1]));
        assert!(tail_snapshots[..4].windows(2).all(|w| w[0] == w[1]));
        assert_ne!(tail_snapshots[3], tail_snapshots[5]);
        assert_eq!(model.metadata.epochs, logs);
        let d = crate::quality::predict_distribution(&corpus.examples[0].image, &model).unwrap();
        assert!((0.5..=9.5).contains(&mean_score(&d)));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus = TrainingCorpus { id: "e".into(), min_psnr: 0.0, max_psnr: 1.0, examples: vec![] };
        let source = BackboneSource::Random { config: BackboneConfig { width_multiplier: 0.125 }, seed: 1 };
        assert!(train_biqan(&corpus, &toy_schedule(), &source, 0, &mut |_, _| {}).is_err());
    }
}
