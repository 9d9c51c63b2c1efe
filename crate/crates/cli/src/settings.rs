//! Effective run configuration: built-in defaults, overlaid by a `key = value`
//! file, overlaid by command-line flags.
//!
//! The file format is one `key = value` pair per line. Blank lines and lines
//! starting with `#` are ignored. Per-scale network keys take either a single
//! value (used at every scale) or a comma-separated list with one entry per
//! scale.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dipstop::data::CropSpec;
use dipstop::dip::DipConfig;
use dipstop::labels::{DEFAULT_SAMPLES, DEFAULT_SIGMA};
use dipstop::quality::{BackboneConfig, PretrainOptions, TrainSchedule};
use dipstop::stop::StopPolicy;
use serde::Serialize;

/// Every key accepted by `--config` files and `--set`, with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for every random stream (network init, labels, training)"),
    ("depth", "number of down/up-sampling stages"),
    ("filters", "shorthand for filters_down and filters_up"),
    ("filters_down", "encoder channels per scale"),
    ("filters_up", "decoder channels per scale"),
    ("filters_skip", "skip-path channels per scale"),
    ("kernel_down", "encoder kernel size per scale"),
    ("kernel_up", "decoder kernel size per scale"),
    ("kernel_skip", "skip-path kernel size per scale"),
    ("input_channels", "channels of the uniform-noise input"),
    ("input_noise_amplitude", "upper bound of the uniform input noise"),
    ("perturb_sigma", "std of the per-iteration input perturbation"),
    ("learning_rate", "prior-network learning rate"),
    ("max_iterations", "iteration budget"),
    ("eval_every", "iterations between scored snapshots"),
    ("smoothing_window", "moving-average length over scores"),
    ("patience", "scored steps without improvement before stopping"),
    ("search_radius", "half-width of the raw-score search around the peak"),
    ("min_evals", "scored steps before a stop may be declared"),
    ("label_sigma", "std of the label sampling distribution"),
    ("label_samples", "samples drawn per label"),
    ("crop_size", "side of square crops taken from each pair (0 disables cropping)"),
    ("crop_count", "crops per pair"),
    ("stage1_epochs", "head-only epochs"),
    ("stage2_epochs", "head plus last block epochs"),
    ("train_learning_rate", "quality-network learning rate"),
    ("input_resize", "side images are resized to before cropping"),
    ("train_crop", "side of training and inference crops"),
    ("horizontal_flip", "random flips during training (true/false)"),
    ("batch_size", "quality-network batch size"),
    ("validation_fraction", "fraction of sources held out for validation"),
    ("width_multiplier", "backbone width for random or pretrained backbones"),
    ("pretrain_epochs", "backbone pretraining epochs"),
    ("pretrain_images", "synthetic images per pretraining epoch"),
    ("pretrain_batch_size", "backbone pretraining batch size"),
    ("pretrain_learning_rate", "backbone pretraining learning rate"),
    ("pretrain_image_size", "side of pretraining images"),
    ("typical_iterations", "iterations spent fitting the typical image in a warm-start study"),
    ("tolerance_db", "warm-start study convergence tolerance in dB"),
];

#[derive(Debug, PartialEq)]
pub struct SettingsError(pub String);

impl fmt::Display for SettingsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SettingsError {}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelSettings {
    pub sigma: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudySettings {
    /// `None` uses `dip.max_iterations`.
    pub typical_iterations: Option<usize>,
    pub tolerance_db: f64,
}

/// The fully resolved configuration, echoed into every trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub dip: DipConfig,
    pub stop: StopPolicy,
    pub labels: LabelSettings,
    pub crop: Option<CropSpec>,
    pub train: TrainSchedule,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainOptions,
    pub study: StudySettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            dip: DipConfig::default(),
            stop: StopPolicy::default(),
            labels: LabelSettings {
                sigma: DEFAULT_SIGMA,
                samples: DEFAULT_SAMPLES,
            },
            crop: None,
            train: TrainSchedule::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainOptions {
                backbone: BackboneConfig::default(),
                ..PretrainOptions::default()
            },
            study: StudySettings {
                typical_iterations: None,
                tolerance_db: 0.5,
            },
        }
    }
}

/// Key/value pairs collected from every layer; later layers replace earlier ones.
#[derive(Clone, Debug, Default)]
pub struct Overrides(BTreeMap<String, String>);

impl Overrides {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), SettingsError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(SettingsError(format!("unknown key {key:?}")));
        }
        self.0.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Parses `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), SettingsError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| SettingsError(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse_file(text: &str, origin: &str) -> Result<Self, SettingsError> {
        let mut out = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            out.set_pair(line)
                .map_err(|e| SettingsError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(out)
    }

    pub fn load_file(path: &Path) -> Result<Self, SettingsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SettingsError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_file(&text, &path.display().to_string())
    }

    /// Layers `other` on top of `self`.
    pub fn merge(&mut self, other: Overrides) {
        self.0.extend(other.0);
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, SettingsError>
    where
        T::Err: fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| SettingsError(format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    fn per_scale(&self, key: &str, depth: usize) -> Result<Option<Vec<usize>>, SettingsError> {
        let Some(raw) = self.0.get(key) else {
            return Ok(None);
        };
        let values = raw
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|e| SettingsError(format!("{key} = {raw:?}: {e}")))
            })
            .collect::<Result<Vec<usize>, _>>()?;
        Ok(Some(if values.len() == 1 { vec![values[0]; depth] } else { values }))
    }

    /// Applies every override to the defaults.
    pub fn resolve(&self) -> Result<Settings, SettingsError> {
        let mut s = Settings::default();
        if let Some(seed) = self.get("seed")? {
            s.seed = seed;
        }
        let d = &mut s.dip;
        if let Some(depth) = self.get::<usize>("depth")? {
            let scaled = DipConfig::uniform(depth, d.filters_down[0], d.filters_skip[0]);
            d.depth = depth;
            d.filters_down = scaled.filters_down;
            d.filters_up = scaled.filters_up;
            d.filters_skip = scaled.filters_skip;
            d.kernel_down = scaled.kernel_down;
            d.kernel_up = scaled.kernel_up;
            d.kernel_skip = scaled.kernel_skip;
        }
        let depth = d.depth;
        if let Some(f) = self.per_scale("filters", depth)? {
            d.filters_down = f.clone();
            d.filters_up = f;
        }
        let lists: [(&str, &mut Vec<usize>); 6] = [
            ("filters_down", &mut d.filters_down),
            ("filters_up", &mut d.filters_up),
            ("filters_skip", &mut d.filters_skip),
            ("kernel_down", &mut d.kernel_down),
            ("kernel_up", &mut d.kernel_up),
            ("kernel_skip", &mut d.kernel_skip),
        ];
        for (key, slot) in lists {
            if let Some(v) = self.per_scale(key, depth)? {
                *slot = v;
            }
        }
        set(&mut d.input_channels, self.get("input_channels")?);
        set(&mut d.input_noise_amplitude, self.get("input_noise_amplitude")?);
        set(&mut d.perturb_sigma, self.get("perturb_sigma")?);
        set(&mut d.learning_rate, self.get("learning_rate")?);
        set(&mut d.max_iterations, self.get("max_iterations")?);
        set(&mut d.eval_every, self.get("eval_every")?);
        d.seed = s.seed;

        let p = &mut s.stop;
        set(&mut p.smoothing_window, self.get("smoothing_window")?);
        set(&mut p.patience, self.get("patience")?);
        set(&mut p.search_radius, self.get("search_radius")?);
        set(&mut p.min_evals, self.get("min_evals")?);

        set(&mut s.labels.sigma, self.get("label_sigma")?);
        set(&mut s.labels.samples, self.get("label_samples")?);
        let size: usize = self.get("crop_size")?.unwrap_or(0);
        let count: usize = self.get("crop_count")?.unwrap_or(1);
        s.crop = (size > 0).then_some(CropSpec { size, count });

        let t = &mut s.train;
        set(&mut t.stage1_epochs, self.get("stage1_epochs")?);
        set(&mut t.stage2_epochs, self.get("stage2_epochs")?);
        set(&mut t.learning_rate, self.get("train_learning_rate")?);
        set(&mut t.input_resize, self.get("input_resize")?);
        set(&mut t.train_crop, self.get("train_crop")?);
        set(&mut t.horizontal_flip, self.get("horizontal_flip")?);
        set(&mut t.batch_size, self.get("batch_size")?);
        set(&mut t.validation_fraction, self.get("validation_fraction")?);

        set(&mut s.backbone.width_multiplier, self.get("width_multiplier")?);
        let pt = &mut s.pretrain;
        pt.backbone = s.backbone;
        pt.seed = s.seed;
        set(&mut pt.epochs, self.get("pretrain_epochs")?);
        set(&mut pt.images_per_epoch, self.get("pretrain_images")?);
        set(&mut pt.batch_size, self.get("pretrain_batch_size")?);
        set(&mut pt.learning_rate, self.get("pretrain_learning_rate")?);
        set(&mut pt.image_size, self.get("pretrain_image_size")?);

        s.study.typical_iterations = self.get("typical_iterations")?;
        set(&mut s.study.tolerance_db, self.get("tolerance_db")?);

        s.dip
            .validate()
            .and_then(|_| s.stop.validate())
            .map_err(|e| SettingsError(e.to_string()))?;
        Ok(s)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let s = Overrides::default().resolve().unwrap();
        assert_eq!(s, Settings::default());
        assert_eq!(s.dip.filters_down, vec![128; 5]);
        assert_eq!(s.stop.min_evals, 50);
    }

    #[test]
    fn later_layers_win() {
        let mut file = Overrides::parse_file("# desk run\nseed = 3\nmax_iterations=200\n\npatience = 7\n", "f").unwrap();
        let mut cli = Overrides::default();
        cli.set("max_iterations", "50").unwrap();
        file.merge(cli);
        let s = file.resolve().unwrap();
        assert_eq!((s.seed, s.dip.seed, s.pretrain.seed), (3, 3, 3));
        assert_eq!(s.dip.max_iterations, 50);
        assert_eq!(s.stop.patience, 7);
    }

    #[test]
    fn per_scale_values_broadcast_to_depth() {
        let o = Overrides::parse_file("depth = 3\nfilters = 16\nfilters_skip = 4,4,2\n", "f").unwrap();
        let s = o.resolve().unwrap();
        assert_eq!(s.dip.filters_up, vec![16; 3]);
        assert_eq!(s.dip.filters_skip, vec![4, 4, 2]);
        assert_eq!(s.dip.kernel_down, vec![3; 3]);
    }

    #[test]
    fn bad_input_is_reported_with_its_origin() {
        let e = Overrides::parse_file("seed = 1\nbogus = 2\n", "run.cfg").unwrap_err();
        assert_eq!(e.0, "run.cfg:2: unknown key \"bogus\"");
        assert!(Overrides::parse_file("seed\n", "f").is_err());
        let o = Overrides::parse_file("seed = x\n", "f").unwrap();
        assert!(o.resolve().is_err());
        let o = Overrides::parse_file("depth = 2\nfilters = 4,4,4\n", "f").unwrap();
        assert!(o.resolve().is_err());
    }

    #[test]
    fn crop_is_off_unless_sized() {
        assert_eq!(Overrides::default().resolve().unwrap().crop, None);
        let o = Overrides::parse_file("crop_size = 32\ncrop_count = 3\n", "f").unwrap();
        assert_eq!(o.resolve().unwrap().crop, Some(CropSpec { size: 32, count: 3 }));
    }
}
