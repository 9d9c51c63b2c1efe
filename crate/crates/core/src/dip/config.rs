use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hyperparameters of the hourglass prior network and its fitting loop.
///
/// Per-scale vectors are indexed from the full-resolution scale (0) down to
/// the deepest one (`depth - 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipConfig {
    pub depth: usize,
    pub filters_down: Vec<usize>,
    pub filters_up: Vec<usize>,
    pub filters_skip: Vec<usize>,
    pub kernel_down: Vec<usize>,
    pub kernel_up: Vec<usize>,
    pub kernel_skip: Vec<usize>,
    pub input_channels: usize,
    /// Base input is drawn from `U(0, input_noise_amplitude)`.
    pub input_noise_amplitude: f32,
    /// Std of the Gaussian perturbation added to the base input every iteration.
    pub perturb_sigma: f32,
    pub learning_rate: f32,
    pub max_iterations: usize,
    /// Snapshot and scoring cadence.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DipConfig {
    fn default() -> Self {
        Self::uniform(5, 128, 4)
    }
}

impl DipConfig {
    /// Same filter counts at every scale; 3×3 up/down kernels and 1×1 skips.
    pub fn uniform(depth: usize, filters: usize, skip: usize) -> Self {
        Self {
            depth,
            filters_down: vec![filters; depth],
            filters_up: vec![filters; depth],
            filters_skip: vec![skip; depth],
            kernel_down: vec![3; depth],
            kernel_up: vec![3; depth],
            kernel_skip: vec![1; depth],
            input_channels: 32,
            input_noise_amplitude: 0.1,
            perturb_sigma: 1.0 / 30.0,
            learning_rate: 0.01,
            max_iterations: 5000,
            eval_every: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::InvalidConfig { field, reason });
        if self.depth == 0 {
            return bad("depth", "must be at least 1".into());
        }
        let per_scale: [(&'static str, &Vec<usize>, bool); 6] = [
            ("filters_down", &self.filters_down, false),
            ("filters_up", &self.filters_up, false),
            ("filters_skip", &self.filters_skip, false),
            ("kernel_down", &self.kernel_down, true),
            ("kernel_up", &self.kernel_up, true),
            ("kernel_skip", &self.kernel_skip, true),
        ];
        for (field, values, is_kernel) in per_scale {
            if values.len() != self.depth {
                return bad(field, format!("has {} entries for depth {}", values.len(), self.depth));
            }
            if let Some(v) = values.iter().find(|v| **v == 0 || (is_kernel && **v % 2 == 0)) {
                let what = if is_kernel { "odd and >= 1" } else { ">= 1" };
                return bad(field, format!("value {v} must be {what}"));
            }
        }
        if self.input_channels == 0 {
            return bad("input_channels", "must be at least 1".into());
        }
        if !(self.input_noise_amplitude > 0.0) || !self.input_noise_amplitude.is_finite() {
            return bad("input_noise_amplitude", format!("{} must be > 0", self.input_noise_amplitude));
        }
        if !(self.perturb_sigma >= 0.0) || !self.perturb_sigma.is_finite() {
            return bad("perturb_sigma", format!("{} must be >= 0", self.perturb_sigma));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", format!("{} must be >= 0", self.learning_rate));
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        if self.max_iterations < self.eval_every {
            return bad(
                "max_iterations",
                format!("{} is below eval_every {}", self.max_iterations, self.eval_every),
            );
        }
        Ok(())
    }

    /// Hash of the fields that determine the weight layout.
    pub fn fingerprint(&self) -> String {
        let structural = (
            self.depth,
            &self.filters_down,
            &self.filters_up,
            &self.filters_skip,
            &self.kernel_down,
            &self.kernel_up,
            &self.kernel_skip,
            self.input_channels,
        );
        let encoded = serde_json::to_vec(&structural).expect("tuple of integers serializes");
        let digest = Sha256::digest(&encoded);
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Side multiple required by `depth` halvings.
    pub fn alignment(&self) -> usize {
        1 << self.depth
    }

    /// Spatial size after reflection padding up to the next multiple of `2^depth`.
    pub fn padded_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let m = self.alignment();
        if height < m || width < m {
            return Err(Error::ImageTooSmall {
                height,
                width,
                depth: self.depth,
                min: m,
            });
        }
        Ok((height.div_ceil(m) * m, width.div_ceil(m) * m))
    }
}
