//! Choosing when to stop a reconstruction from a stream of quality scores.
//!
//! Raw scores are smoothed by a causal moving average. Once the smoothed
//! maximum (over full windows) has gone `patience` scored steps without improvement (and at least
//! `min_evals` steps have been scored) the run is stopped, and the final pick
//! is the best raw score within `search_radius` steps of that maximum.

use serde::{Deserialize, Serialize};

use crate::dip::{Control, Observer, Selection, Verdict};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopPolicy {
    /// Moving-average length `W`, in scored steps.
    pub smoothing_window: usize,
    /// Scored steps without a new smoothed maximum before the peak is declared.
    pub patience: usize,
    /// Half-width of the raw-score search around the declared peak.
    pub search_radius: usize,
    /// Scored steps that must elapse before a peak can be declared.
    pub min_evals: usize,
}

impl Default for StopPolicy {
    fn default() -> Self {
        Self {
            smoothing_window: 15,
            patience: 30,
            search_radius: 30,
            min_evals: 50,
        }
    }
}

impl StopPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.smoothing_window == 0 {
            return bad("smoothing_window", "must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if self.min_evals < self.smoothing_window {
            return bad("min_evals", "must be at least smoothing_window");
        }
        Ok(())
    }

    /// Scored steps a snapshot store must retain so the final pick is still available.
    ///
    /// The pick is within `search_radius` of a peak that is `patience` steps old,
    /// unless `min_evals` held the declaration back, in which case the whole
    /// stream so far is at most `min_evals` long.
    pub fn retention_window(&self) -> usize {
        (self.patience + self.search_radius).max(self.min_evals.saturating_sub(1)) + 1
    }
}

/// Causal moving average: `out[t] = mean(raw[max(0, t-w+1)..=t])`.
pub fn smooth(raw: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..raw.len()).map(|t| window_mean(raw, t, window)).collect()
}

fn window_mean(raw: &[f64], t: usize, window: usize) -> f64 {
    let start = (t + 1).saturating_sub(window);
    let slice = &raw[start..=t];
    slice.iter().sum::<f64>() / slice.len() as f64
}

/// A declared coarse peak.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarsePeak {
    /// Index of the smoothed maximum.
    pub index: usize,
    /// Index at which the patience rule fired.
    pub declared_at: usize,
}

/// Scans a smoothed stream in arrival order and returns the first declaration, if any.
pub fn detect_coarse_peak(smoothed: &[f64], policy: &StopPolicy) -> Option<CoarsePeak> {
    let mut tracker = PeakTracker::default();
    smoothed
        .iter()
        .enumerate()
        .find_map(|(t, v)| tracker.push(t, *v, policy))
}

/// Running maximum with the patience rule; the earliest index wins ties.
///
/// Only full windows (`t >= W - 1`) compete for the maximum. The shorter
/// averages at the start of a stream are far noisier and would otherwise
/// pin the peak to the first few steps.
#[derive(Clone, Debug, Default)]
struct PeakTracker {
    best: Option<(usize, f64)>,
}

impl PeakTracker {
    fn push(&mut self, t: usize, value: f64, policy: &StopPolicy) -> Option<CoarsePeak> {
        if t + 1 < policy.smoothing_window {
            return None;
        }
        match self.best {
            Some((_, best)) if !(value > best) => {}
            _ => self.best = Some((t, value)),
        }
        let (index, _) = self.best?;
        (t - index >= policy.patience && t + 1 >= policy.min_evals).then_some(CoarsePeak {
            index,
            declared_at: t,
        })
    }
}

/// Index of the largest raw score in `[coarse - radius, coarse + radius]`, earliest on ties.
pub fn fine_search(raw: &[f64], coarse: usize, radius: usize) -> usize {
    assert!(coarse < raw.len(), "coarse index {coarse} outside stream of {}", raw.len());
    let lo = coarse.saturating_sub(radius);
    let hi = (coarse + radius).min(raw.len() - 1);
    argmax(&raw[lo..=hi]) + lo
}

/// Earliest index of the maximum; NaN never wins.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || values[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

/// Outcome of the policy over one score stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub policy: StopPolicy,
    pub raw_scores: Vec<f64>,
    pub smoothed_scores: Vec<f64>,
    pub coarse_peak: Option<usize>,
    /// Scored step at which the stop was issued.
    pub declared_at: Option<usize>,
    /// Scored step of the chosen snapshot.
    pub final_index: usize,
    pub no_peak_declared: bool,
}

/// Online form of the policy, fed one raw score per scored step.
#[derive(Clone, Debug)]
pub struct StopController {
    policy: StopPolicy,
    raw: Vec<f64>,
    smoothed: Vec<f64>,
    tracker: PeakTracker,
    declared: Option<CoarsePeak>,
}

impl StopController {
    pub fn new(policy: StopPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            raw: Vec::new(),
            smoothed: Vec::new(),
            tracker: PeakTracker::default(),
            declared: None,
        })
    }

    pub fn policy(&self) -> &StopPolicy {
        &self.policy
    }

    /// Records a raw score and returns its smoothed value and whether to stop now.
    pub fn push(&mut self, raw: f64) -> (f64, Control) {
        let t = self.raw.len();
        self.raw.push(raw);
        let s = window_mean(&self.raw, t, self.policy.smoothing_window);
        self.smoothed.push(s);
        if self.declared.is_none() {
            self.declared = self.tracker.push(t, s, &self.policy);
        }
        let control = if self.declared.is_some() {
            Control::Stop
        } else {
            Control::Continue
        };
        (s, control)
    }

    pub fn is_declared(&self) -> bool {
        self.declared.is_some()
    }

    /// Final choice over everything pushed so far.
    ///
    /// Without a declaration the search is centered on the global smoothed maximum.
    pub fn decide(&self) -> Option<StopDecision> {
        if self.raw.is_empty() {
            return None;
        }
        let coarse = match self.declared {
            Some(peak) => peak.index,
            None => argmax(&self.smoothed),
        };
        Some(StopDecision {
            policy: self.policy,
            raw_scores: self.raw.clone(),
            smoothed_scores: self.smoothed.clone(),
            coarse_peak: Some(coarse),
            declared_at: self.declared.map(|p| p.declared_at),
            final_index: fine_search(&self.raw, coarse, self.policy.search_radius),
            no_peak_declared: self.declared.is_none(),
        })
    }
}

/// Feeds `scores` in order, stopping at the declaration, and returns the decision.
pub fn run_policy(scores: &[f64], policy: &StopPolicy) -> Result<StopDecision> {
    let mut controller = StopController::new(*policy)?;
    for s in scores {
        if controller.push(*s).1 == Control::Stop {
            break;
        }
    }
    controller
        .decide()
        .ok_or_else(|| Error::Data("empty score stream".into()))
}

/// Engine observer that scores each snapshot and applies a [`StopController`].
pub struct ScoredStop<F> {
    scorer: F,
    controller: StopController,
}

impl<F> ScoredStop<F>
where
    F: FnMut(&Image) -> Result<f64>,
{
    pub fn new(policy: StopPolicy, scorer: F) -> Result<Self> {
        Ok(Self {
            scorer,
            controller: StopController::new(policy)?,
        })
    }

    pub fn controller(&self) -> &StopController {
        &self.controller
    }

    pub fn decision(&self) -> Option<StopDecision> {
        self.controller.decide()
    }
}

impl<F> Observer for ScoredStop<F>
where
    F: FnMut(&Image) -> Result<f64>,
{
    fn observe(&mut self, _iteration: usize, snapshot: &Image) -> Result<Verdict> {
        let raw = (self.scorer)(snapshot)?;
        let (smoothed, control) = self.controller.push(raw);
        Ok(Verdict {
            control,
            raw_score: Some(raw),
            smoothed_score: Some(smoothed),
        })
    }

    fn finish(&mut self) -> Result<Selection> {
        Ok(match self.controller.decide() {
            Some(d) => Selection {
                step: Some(d.final_index),
                declared: !d.no_peak_declared,
            },
            None => Selection::default(),
        })
    }
}
