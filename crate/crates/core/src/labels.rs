//! Full-reference PSNR and its conversion into target score histograms.
//!
//! A PSNR is mapped linearly onto `μ ∈ [2.5, 7.5]` using the corpus-wide
//! PSNR extremes, then `M` draws from `N(μ, σ²)` are clamped into `[0, 10)`
//! and counted into the unit-width bins `[i-1, i)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::quality::{ScoreDistribution, BINS};

/// Returned for identical images instead of `+∞`.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const DEFAULT_SIGMA: f64 = 1.5;
pub const DEFAULT_SAMPLES: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelGenConfig {
    pub sigma: f64,
    /// Samples drawn per label (`M`).
    pub samples: usize,
    pub min_psnr: f64,
    pub max_psnr: f64,
    pub seed: u64,
}

impl LabelGenConfig {
    /// Config whose PSNR range spans exactly the given values.
    pub fn for_corpus(psnrs: &[f64], sigma: f64, samples: usize, seed: u64) -> Result<Self> {
        if psnrs.is_empty() {
            return Err(Error::Data("no PSNR values to label".into()));
        }
        let min = psnrs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = psnrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let config = Self {
            sigma,
            samples,
            min_psnr: min,
            max_psnr: max,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_psnr > self.min_psnr) {
            return Err(Error::DegenerateRange {
                min: self.min_psnr,
                max: self.max_psnr,
            });
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig {
                field: "samples",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig {
                field: "sigma",
                reason: format!("{} must be > 0", self.sigma),
            });
        }
        Ok(())
    }
}

/// `10·log10(1 / MSE)` for `[0, 1]` images, capped at [`PSNR_CAP_DB`].
pub fn compute_psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    Ok(psnr_from_mse(crate::dip::l2_loss(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Linear map of `[min_psnr, max_psnr]` onto `[2.5, 7.5]`; out-of-range values are clamped first.
pub fn psnr_to_mu(psnr: f64, config: &LabelGenConfig) -> Result<f64> {
    if !(config.max_psnr > config.min_psnr) {
        return Err(Error::DegenerateRange {
            min: config.min_psnr,
            max: config.max_psnr,
        });
    }
    let p = psnr.clamp(config.min_psnr, config.max_psnr);
    Ok((p - config.min_psnr) / (config.max_psnr - config.min_psnr) * 5.0 + 2.5)
}

/// Bin counts of `samples` draws from `N(mu, sigma²)` clamped into `[0, 10)`.
pub fn histogram_counts(mu: f64, config: &LabelGenConfig, rng: &mut ChaCha8Rng) -> [u64; BINS] {
    let normal = Normal::new(mu, config.sigma).expect("sigma validated positive");
    let mut counts = [0u64; BINS];
    for _ in 0..config.samples {
        let v: f64 = normal.sample(rng);
        let bin = if v.is_nan() || v < 0.0 {
            0
        } else {
            (v.floor() as usize).min(BINS - 1)
        };
        counts[bin] += 1;
    }
    counts
}

/// Target distribution for a given `mu`: the histogram divided by `samples`.
pub fn mu_to_distribution(mu: f64, config: &LabelGenConfig, rng: &mut ChaCha8Rng) -> ScoreDistribution {
    let counts = histogram_counts(mu, config, rng);
    let m = config.samples as f64;
    let mut probs = [0.0; BINS];
    for (p, c) in probs.iter_mut().zip(counts) {
        *p = c as f64 / m;
    }
    ScoreDistribution::new(probs).expect("counts sum to samples")
}

/// Random stream for one record, independent of processing order.
pub fn record_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// A record to label: a stable key (used to derive its random stream) and its PSNR.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelInput {
    pub key: String,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub key: String,
    pub psnr: f64,
    pub mu: f64,
    pub target: ScoreDistribution,
}

/// Labels every record. The config's PSNR range must equal the extremes of the input set.
pub fn label_corpus(records: &[LabelInput], config: &LabelGenConfig) -> Result<Vec<Label>> {
    if records.is_empty() {
        return Err(Error::Data("no records to label".into()));
    }
    config.validate()?;
    let psnrs: Vec<f64> = records.iter().map(|r| r.psnr).collect();
    let extremes = LabelGenConfig::for_corpus(&psnrs, config.sigma, config.samples, config.seed)?;
    if extremes.min_psnr != config.min_psnr || extremes.max_psnr != config.max_psnr {
        return Err(Error::Data(format!(
            "label range [{}, {}] differs from corpus extremes [{}, {}]",
            config.min_psnr, config.max_psnr, extremes.min_psnr, extremes.max_psnr
        )));
    }
    records
        .iter()
        .map(|r| {
            let mu = psnr_to_mu(r.psnr, config)?;
            let target = mu_to_distribution(mu, config, &mut record_rng(config.seed, &r.key));
            Ok(Label {
                key: r.key.clone(),
                psnr: r.psnr,
                mu,
                target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::mean_score;
    use rand::Rng;

    fn config(min: f64, max: f64) -> LabelGenConfig {
        LabelGenConfig {
            sigma: DEFAULT_SIGMA,
            samples: 1_000_000,
            min_psnr: min,
            max_psnr: max,
            seed: 0,
        }
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, 0.3).unwrap();
        assert_eq!(compute_psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = Image::filled(4, 4, 0.4).unwrap();
        assert!((compute_psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(compute_psnr(&a, &Image::filled(4, 5, 0.3).unwrap()).is_err());
    }

    #[test]
    fn psnr_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Image::from_fn(13, 17, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        let b = Image::from_fn(13, 17, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        let mut sq = 0.0f64;
        for y in 0..13 {
            for x in 0..17 {
                let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                for c in 0..3 {
                    sq += (f64::from(p[c]) - f64::from(q[c])).powi(2);
                }
            }
        }
        let oracle = 10.0 * (1.0 / (sq / (13.0 * 17.0 * 3.0))).log10();
        assert!((compute_psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn mu_mapping_examples() {
        let c = config(30.0, 40.0);
        assert_eq!(psnr_to_mu(30.0, &c).unwrap(), 2.5);
        assert_eq!(psnr_to_mu(40.0, &c).unwrap(), 7.5);
        assert!((psnr_to_mu(35.0, &c).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(psnr_to_mu(10.0, &c).unwrap(), 2.5);
        assert_eq!(psnr_to_mu(99.0, &c).unwrap(), 7.5);
        assert!(matches!(psnr_to_mu(30.0, &config(30.0, 30.0)), Err(Error::DegenerateRange { .. })));
    }

    #[test]
    fn counts_sum_to_samples() {
        let mut c = config(0.0, 1.0);
        c.samples = 12_345;
        for mu in [0.0, 2.5, 5.0, 9.9, 12.0] {
            let counts = histogram_counts(mu, &c, &mut record_rng(1, "k"));
            assert_eq!(counts.iter().sum::<u64>(), 12_345);
        }
    }

    #[test]
    fn monte_carlo_mean_tracks_mu() {
        let c = config(0.0, 1.0);
        let d = mu_to_distribution(5.0, &c, &mut record_rng(3, "mid"));
        assert!((mean_score(&d) - 5.0).abs() < 0.02);
        let p = d.probs();
        for i in 0..5 {
            assert!((p[4 - i] - p[5 + i]).abs() < 0.005, "bins {} and {}", 4 - i, 5 + i);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_clamping_bias_stays_small() {
        let c = config(0.0, 1.0);
        for (mu, tol) in [(3.5, 0.02), (6.5, 0.02), (2.5, 0.1), (7.5, 0.1)] {
            let d = mu_to_distribution(mu, &c, &mut record_rng(9, &format!("{mu}")));
            assert!((mean_score(&d) - mu).abs() < tol, "mu {mu}: {}", mean_score(&d));
        }
    }

    proptest::proptest! {
        #[test]
        fn mu_is_affine_and_increasing(lo in -10.0f64..60.0, span in 0.1f64..40.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let c = config(lo, lo + span);
            let (a, b) = (a.min(b), a.max(b));
            let ma = psnr_to_mu(lo + a * span, &c).unwrap();
            let mb = psnr_to_mu(lo + b * span, &c).unwrap();
            proptest::prop_assert!((ma - (2.5 + 5.0 * a)).abs() < 1e-9);
            proptest::prop_assert!(a == b || mb > ma);
            proptest::prop_assert!((2.5..=7.5).contains(&ma));
        }
    }

    #[test]
    fn labeling_uses_corpus_extremes_and_is_deterministic() {
        let records: Vec<LabelInput> = [30.0, 33.0, 40.0]
            .iter()
            .enumerate()
            .map(|(i, p)| LabelInput { key: format!("r{i}"), psnr: *p })
            .collect();
        let mut c = LabelGenConfig::for_corpus(&[30.0, 33.0, 40.0], 1.5, 1000, 7).unwrap();
        let a = label_corpus(&records, &c).unwrap();
        assert_eq!(a[0].mu, 2.5);
        assert_eq!(a[2].mu, 7.5);
        assert_eq!(a, label_corpus(&records, &c).unwrap());
        c.max_psnr = 41.0;
        assert!(label_corpus(&records, &c).is_err());
        assert!(matches!(
            LabelGenConfig::for_corpus(&[31.0, 31.0], 1.5, 10, 0),
            Err(Error::DegenerateRange { .. })
        ));
        assert!(label_corpus(&[], &c).is_err());
    }
}
