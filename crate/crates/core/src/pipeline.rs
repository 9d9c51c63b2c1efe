//! Automatic-stop denoising and the warm-start comparison.

use serde::{Deserialize, Serialize};

use crate::dip::{build_network, reconstruct, reconstruct_with, DipConfig, NetworkState, Reconstruction, RunOptions, Verdict};
use crate::error::Result;
use crate::image::Image;
use crate::labels::compute_psnr;
use crate::quality::{mean_score, predict_distribution, BiqanModel};
use crate::stop::{ScoredStop, StopDecision, StopPolicy};

pub struct Denoised {
    pub reconstruction: Reconstruction,
    pub decision: StopDecision,
}

/// Runs the prior network on `noisy`, scoring every snapshot with `model` and
/// stopping under `policy`.
pub fn denoise(
    noisy: &Image,
    model: &BiqanModel,
    config: &DipConfig,
    policy: &StopPolicy,
    warm_start: Option<&NetworkState>,
    options: &RunOptions,
) -> Result<Denoised> {
    // Score the 8-bit snapshot that is persisted, as the model was trained on those.
    let scorer = |img: &Image| Ok(mean_score(&predict_distribution(&img.quantized(), model)?));
    let mut observer = ScoredStop::new(*policy, scorer)?;
    let reconstruction = reconstruct_with(noisy, config, warm_start, &mut observer, options)?;
    let decision = observer.decision().expect("at least one snapshot is scored");
    Ok(Denoised {
        reconstruction,
        decision,
    })
}

/// PSNR of every snapshot against `clean`, in scoring order.
pub fn psnr_curve(noisy: &Image, clean: &Image, config: &DipConfig, warm_start: Option<&NetworkState>) -> Result<(Vec<f64>, NetworkState)> {
    let mut curve = Vec::new();
    let mut observer = |_: usize, snapshot: &Image| -> Result<Verdict> {
        curve.push(compute_psnr(snapshot, clean)?);
        Ok(Verdict::proceed())
    };
    let run = reconstruct(noisy, config, warm_start, &mut observer)?;
    Ok((curve, run.state))
}

/// First scored step (1-based) at which `curve` reaches `target`.
pub fn steps_to_reach(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|p| *p >= target).map(|i| i + 1)
}

fn best(curve: &[f64]) -> (f64, usize) {
    curve
        .iter()
        .enumerate()
        .fold((f64::NEG_INFINITY, 0), |b, (i, p)| if *p > b.0 { (*p, i + 1) } else { b })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant or lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    /// Configuration shared by the typical fit and every cold and warm run.
    pub dip: DipConfig,
    /// Iterations spent fitting the typical image (0 leaves the weights at initialization).
    pub typical_iterations: usize,
    /// A run counts as converged once it is within this many dB of the cold run's best.
    pub tolerance_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub id: String,
    pub cold_best_psnr: f64,
    pub cold_best_step: usize,
    pub warm_best_psnr: f64,
    pub warm_best_step: usize,
    /// Steps until each run first comes within tolerance of the cold best.
    pub cold_steps_to_target: usize,
    pub warm_steps_to_target: Option<usize>,
    /// `warm_best_psnr - cold_best_psnr`.
    pub best_psnr_delta: f64,
    pub warm_faster: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub typical_id: String,
    pub options: StudyOptions,
    pub pairs: Vec<PairComparison>,
    /// `1 - Σ warm steps / Σ cold steps` to the target; a warm run that never
    /// reaches it is charged its full length.
    pub reduction_ratio: f64,
    pub warm_faster_count: usize,
}

/// A pair taking part in the study.
pub struct StudyPair<'a> {
    pub id: &'a str,
    pub clean: &'a Image,
    pub noisy: &'a Image,
}

/// Fits the typical noisy image, then compares cold and warm runs on every other pair.
pub fn warmstart_study(typical_id: &str, typical_noisy: &Image, pairs: &[StudyPair<'_>], options: &StudyOptions) -> Result<StudyReport> {
    options.dip.validate()?;
    let typical = if options.typical_iterations == 0 {
        build_network(&options.dip, options.dip.seed, typical_noisy.height(), typical_noisy.width())?
    } else {
        let mut fit = options.dip.clone();
        fit.max_iterations = options.typical_iterations;
        fit.eval_every = fit.eval_every.min(fit.max_iterations);
        reconstruct(typical_noisy, &fit, None, &mut crate::dip::Passive)?.state
    };

    let mut rows = Vec::new();
    for pair in pairs.iter().filter(|p| p.id != typical_id) {
        let (cold, _) = psnr_curve(pair.noisy, pair.clean, &options.dip, None)?;
        let (warm, _) = psnr_curve(pair.noisy, pair.clean, &options.dip, Some(&typical))?;
        let (cold_best, cold_best_step) = best(&cold);
        let (warm_best, warm_best_step) = best(&warm);
        let target = cold_best - options.tolerance_db;
        let cold_steps = steps_to_reach(&cold, target).expect("the cold best reaches its own target");
        let warm_steps = steps_to_reach(&warm, target);
        rows.push(PairComparison {
            id: pair.id.to_string(),
            cold_best_psnr: cold_best,
            cold_best_step,
            warm_best_psnr: warm_best,
            warm_best_step,
            cold_steps_to_target: cold_steps,
            warm_steps_to_target: warm_steps,
            best_psnr_delta: warm_best - cold_best,
            warm_faster: warm_steps.is_some_and(|w| w < cold_steps),
        });
    }
    let cold_total: usize = rows.iter().map(|r| r.cold_steps_to_target).sum();
    let warm_total: usize = rows
        .iter()
        .map(|r| r.warm_steps_to_target.unwrap_or(options.dip.max_iterations / options.dip.eval_every))
        .sum();
    let reduction_ratio = if cold_total == 0 {
        0.0
    } else {
        1.0 - warm_total as f64 / cold_total as f64
    };
    Ok(StudyReport {
        typical_id: typical_id.to_string(),
        options: options.clone(),
        warm_faster_count: rows.iter().filter(|r| r.warm_faster).count(),
        pairs: rows,
        reduction_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::noisy_pair;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // Ranks with ties: [1.5, 1.5, 3] against [1, 2, 3].
        let r = spearman(&[5.0, 5.0, 7.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.75f64.sqrt() / 1.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn steps_are_one_based() {
        assert_eq!(steps_to_reach(&[1.0, 3.0, 2.0], 2.5), Some(2));
        assert_eq!(steps_to_reach(&[1.0], 2.5), None);
        assert_eq!(best(&[1.0, 3.0, 3.0]), (3.0, 2));
    }

    #[test]
    fn untrained_typical_is_a_null_transfer() {
        let mut dip = DipConfig::uniform(2, 4, 2);
        dip.input_channels = 4;
        dip.max_iterations = 20;
        dip.eval_every = 5;
        let (tc, tn) = noisy_pair(16, 16, 0.1, 1).unwrap();
        let (c, n) = noisy_pair(16, 16, 0.1, 2).unwrap();
        let pairs = [
            StudyPair { id: "t", clean: &tc, noisy: &tn },
            StudyPair { id: "a", clean: &c, noisy: &n },
        ];
        let options = StudyOptions {
            dip,
            typical_iterations: 0,
            tolerance_db: 0.5,
        };
        let report = warmstart_study("t", &tn, &pairs, &options).unwrap();
        assert_eq!(report.pairs.len(), 1);
        assert_eq!(report.reduction_ratio, 0.0);
        assert_eq!(report.pairs[0].best_psnr_delta, 0.0);
        assert!(!report.pairs[0].warm_faster);
    }
}
