//! No-reference quality network: score histograms, the EMD loss, the
//! depthwise-separable classifier, and its transfer-training schedule.

mod backbone;
mod distribution;
mod model;
mod pretrain;
mod train;

pub use backbone::{Backbone, BackboneConfig};
pub use distribution::{emd_loss, mean_score, ScoreDistribution, BINS, BIN_SCORES};
pub use model::{
    load_backbone, load_model, predict_distribution, save_backbone, save_model, sidecar_path,
    BiqanModel, ModelMetadata, Normalization, IMAGENET_MEAN, IMAGENET_STD, MODEL_FORMAT_VERSION,
};
pub use pretrain::{
    degraded_scene, pretrain_backbone, PretrainLog, PretrainOptions, BLUR_LEVELS, NOISE_LEVELS,
};
pub use train::{
    split_by_source, train_biqan, BackboneSource, EpochLog, TrainSchedule, TrainingCorpus,
    TrainingExample,
};
