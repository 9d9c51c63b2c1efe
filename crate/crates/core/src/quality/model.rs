//! The quality network: backbone, 10-way softmax head, and its on-disk form.
//!
//! A model is stored as two files: `<name>.bin` holds the weights
//! (`b"BIQANWTS"`, u32 version, u64 count, f32 × count, sha-256), and
//! `<name>.json` holds [`ModelMetadata`].

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::{Backbone, BackboneConfig};
use super::distribution::{ScoreDistribution, BINS};
use super::train::{EpochLog, TrainSchedule};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::nn::{Layer, Linear, Shape, Tensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const WEIGHTS_MAGIC: &[u8; 8] = b"BIQANWTS";
const BACKBONE_MAGIC: &[u8; 8] = b"BIQANBBN";

/// Per-channel normalization published with ImageNet-pretrained backbones.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// Sidecar document stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    /// Where the backbone weights came from (a file path or `random:<seed>`).
    pub backbone_source: String,
    pub normalization: Normalization,
    pub input_resize: usize,
    pub input_crop: usize,
    pub corpus_id: Option<String>,
    /// PSNR range the training labels were mapped from, in dB.
    pub min_psnr: Option<f64>,
    pub max_psnr: Option<f64>,
    pub schedule: Option<TrainSchedule>,
    pub epochs: Vec<EpochLog>,
    pub seed: u64,
}

pub struct BiqanModel {
    pub backbone: Backbone,
    pub head: Linear,
    pub metadata: ModelMetadata,
}

impl BiqanModel {
    /// Random head on top of `backbone`.
    pub fn new(backbone: Backbone, backbone_source: String, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let head = Linear::new(backbone.config.feature_channels(), BINS, &mut rng);
        let metadata = ModelMetadata {
            format_version: MODEL_FORMAT_VERSION,
            backbone: backbone.config,
            backbone_source,
            normalization: Normalization::default(),
            input_resize: 256,
            input_crop: 224,
            corpus_id: None,
            min_psnr: None,
            max_psnr: None,
            schedule: None,
            epochs: Vec::new(),
            seed,
        };
        Self {
            backbone,
            head,
            metadata,
        }
    }

    /// Network input for one image: normalized planar pixels as a `1×3×H×W` tensor.
    pub fn input_tensor(&self, image: &Image) -> Tensor {
        normalized_input(image, &self.metadata.normalization)
    }

    /// Inference geometry: resize to `input_resize²`, then center-crop `input_crop²`.
    pub fn preprocess(&self, image: &Image) -> Result<Tensor> {
        let r = self.metadata.input_resize;
        let c = self.metadata.input_crop;
        let resized = image.resize(r, r)?;
        Ok(self.input_tensor(&resized.center_crop(c, c)?))
    }

    /// Softmax distributions for a batch of preprocessed inputs.
    pub fn distributions(&self, batch: Tensor) -> Vec<ScoreDistribution> {
        let logits = self.head.infer(self.backbone.features(batch));
        logits.data.chunks_exact(BINS).map(softmax).collect()
    }

    fn state(&self) -> Vec<&[f32]> {
        let mut v = self.backbone.state();
        v.extend(self.head.state());
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = self.backbone.state_mut();
        v.extend(self.head.state_mut());
        v
    }
}

pub(crate) fn normalized_input(image: &Image, norm: &Normalization) -> Tensor {
    let plane = image.height() * image.width();
    let mut planar = image.to_planar();
    for c in 0..3 {
        for v in &mut planar[c * plane..(c + 1) * plane] {
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
    }
    Tensor::from_vec(Shape::new(1, 3, image.height(), image.width()), planar)
}

pub(crate) fn softmax(logits: &[f32]) -> ScoreDistribution {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
    let exps: Vec<f64> = logits.iter().map(|z| f64::from(z - max).exp()).collect();
    ScoreDistribution::from_weights(&exps).expect("softmax weights are positive")
}

/// Predicted quality histogram for one snapshot.
pub fn predict_distribution(image: &Image, model: &BiqanModel) -> Result<ScoreDistribution> {
    if model.metadata.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            expected: MODEL_FORMAT_VERSION,
            found: model.metadata.format_version,
        });
    }
    let x = model.preprocess(image)?;
    Ok(model.distributions(x).remove(0))
}

fn write_weights(magic: &[u8; 8], tensors: Vec<&[f32]>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.write_u32::<LE>(MODEL_FORMAT_VERSION).unwrap();
    let count: usize = tensors.iter().map(|t| t.len()).sum();
    buf.write_u64::<LE>(count as u64).unwrap();
    for v in tensors.into_iter().flatten() {
        buf.write_f32::<LE>(*v).unwrap();
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf).at(path)
}

fn read_weights(magic: &[u8; 8], targets: Vec<&mut Vec<f32>>, path: &Path) -> Result<()> {
    let bytes = fs::read(path).at(path)?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != magic {
        return Err(corrupt("not a weights file of the expected kind"));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Cursor::new(&payload[8..]);
    let version = r.read_u32::<LE>().map_err(|_| corrupt("truncated"))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            expected: MODEL_FORMAT_VERSION,
            found: version,
        });
    }
    let count = r.read_u64::<LE>().map_err(|_| corrupt("truncated"))? as usize;
    let expected: usize = targets.iter().map(|t| t.len()).sum();
    if count != expected {
        return Err(Error::Data(format!(
            "{}: holds {count} weights, architecture needs {expected}",
            path.display()
        )));
    }
    for t in targets {
        let mut raw = vec![0u8; t.len() * 4];
        r.read_exact(&mut raw).map_err(|_| corrupt("truncated"))?;
        let mut c = Cursor::new(raw);
        c.read_f32_into::<LE>(t).expect("buffer sized for the tensor");
    }
    Ok(())
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Writes `path` (weights) and its `.json` sidecar.
pub fn save_model(model: &BiqanModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_weights(WEIGHTS_MAGIC, model.state(), path)?;
    let meta = sidecar_path(path);
    fs::write(&meta, serde_json::to_vec_pretty(&model.metadata)?).at(&meta)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BiqanModel> {
    let path = path.as_ref();
    let meta_path = sidecar_path(path);
    let metadata: ModelMetadata = serde_json::from_slice(&fs::read(&meta_path).at(&meta_path)?)?;
    if metadata.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            expected: MODEL_FORMAT_VERSION,
            found: metadata.format_version,
        });
    }
    let backbone = Backbone::new(metadata.backbone, &mut ChaCha8Rng::seed_from_u64(0));
    let seed = metadata.seed;
    let mut model = BiqanModel::new(backbone, metadata.backbone_source.clone(), seed);
    model.metadata = metadata;
    read_weights(WEIGHTS_MAGIC, model.state_mut(), path)?;
    Ok(model)
}

/// Stores backbone weights (including normalization statistics) for later transfer.
pub fn save_backbone(backbone: &Backbone, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_weights(BACKBONE_MAGIC, backbone.state(), path)?;
    let meta = sidecar_path(path);
    fs::write(&meta, serde_json::to_vec_pretty(&backbone.config)?).at(&meta)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<Backbone> {
    let path = path.as_ref();
    let meta = sidecar_path(path);
    let config: BackboneConfig = serde_json::from_slice(&fs::read(&meta).at(&meta)?)?;
    let mut backbone = Backbone::new(config, &mut ChaCha8Rng::seed_from_u64(0));
    read_weights(BACKBONE_MAGIC, backbone.state_mut(), path)?;
    Ok(backbone)
}
