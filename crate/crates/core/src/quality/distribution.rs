use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of quality bins.
pub const BINS: usize = 10;

/// Bin centers `s_i = i - 0.5`.
pub const BIN_SCORES: [f64; BINS] = [0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 9.5];

const SUM_TOLERANCE: f64 = 1e-6;

/// A probability mass function over the ten quality bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreDistribution {
    probs: [f64; BINS],
}

impl ScoreDistribution {
    /// Checks non-negativity and that the mass sums to one within `1e-6`.
    pub fn new(probs: [f64; BINS]) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::Data(format!("probability {p} is not a finite non-negative value")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Data(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(bin: usize) -> Self {
        assert!(bin < BINS, "bin {bin} out of range");
        let mut probs = [0.0; BINS];
        probs[bin] = 1.0;
        Self { probs }
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / BINS as f64; BINS],
        }
    }

    /// Normalizes non-negative weights (for instance histogram counts).
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.len() != BINS {
            return Err(Error::Data(format!("{} weights for {BINS} bins", weights.len())));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Data("weights sum to zero".into()));
        }
        let mut probs = [0.0; BINS];
        for (p, w) in probs.iter_mut().zip(weights) {
            *p = w / total;
        }
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64; BINS] {
        &self.probs
    }

    /// `CDF(k) = Σ_{i≤k} p_i` for `k = 1..=10`.
    pub fn cdf(&self) -> [f64; BINS] {
        let mut acc = 0.0;
        let mut out = [0.0; BINS];
        for (o, p) in out.iter_mut().zip(&self.probs) {
            acc += p;
            *o = acc;
        }
        out
    }
}

impl TryFrom<Vec<f64>> for ScoreDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let probs: [f64; BINS] = v
            .try_into()
            .map_err(|v: Vec<f64>| Error::Data(format!("{} probabilities for {BINS} bins", v.len())))?;
        Self::new(probs)
    }
}

impl From<ScoreDistribution> for Vec<f64> {
    fn from(d: ScoreDistribution) -> Self {
        d.probs.to_vec()
    }
}

/// Expected bin score `Σ s_i p_i`, in `[0.5, 9.5]`.
pub fn mean_score(dist: &ScoreDistribution) -> f64 {
    dist.probs.iter().zip(BIN_SCORES).map(|(p, s)| p * s).sum()
}

/// Earth mover's distance between cumulative distributions:
/// `sqrt(mean_k (CDF_p(k) - CDF_q(k))²)`.
pub fn emd_loss(p: &ScoreDistribution, q: &ScoreDistribution) -> f64 {
    emd_from_probs(&p.probs, &q.probs)
}

pub(crate) fn emd_from_probs(p: &[f64; BINS], q: &[f64; BINS]) -> f64 {
    let (mut cp, mut cq, mut sum) = (0.0, 0.0, 0.0);
    for k in 0..BINS {
        cp += p[k];
        cq += q[k];
        sum += (cp - cq).powi(2);
    }
    (sum / BINS as f64).sqrt()
}

/// Gradient of `emd(target, predicted)` with respect to `predicted`.
pub(crate) fn emd_grad(target: &[f64; BINS], predicted: &[f64; BINS]) -> [f64; BINS] {
    let mut diff = [0.0; BINS];
    let (mut ct, mut cp) = (0.0, 0.0);
    for k in 0..BINS {
        ct += target[k];
        cp += predicted[k];
        diff[k] = cp - ct;
    }
    let emd = (diff.iter().map(|d| d * d).sum::<f64>() / BINS as f64).sqrt();
    let mut grad = [0.0; BINS];
    if emd == 0.0 {
        return grad;
    }
    // d emd / d CDF_pred(k) = diff_k / (N · emd); CDF_pred(k) depends on p_i for i ≤ k.
    let mut tail = 0.0;
    for i in (0..BINS).rev() {
        tail += diff[i] / (BINS as f64 * emd);
        grad[i] = tail;
    }
    grad
}
