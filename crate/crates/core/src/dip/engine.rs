//! The single-image fitting loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::DipConfig;
use super::state::{base_input, build_network, crop_output, seeded, NetworkState, STREAM_PERTURB};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::labels::compute_psnr;
use crate::nn::{source_index, zero_grads, Adam, Layer, Padding, Shape, Tensor};

/// What the observer wants the loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Observer response to one snapshot; the scores are recorded in the trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub control: Control,
    pub raw_score: Option<f64>,
    pub smoothed_score: Option<f64>,
}

impl Verdict {
    pub fn proceed() -> Self {
        Self {
            control: Control::Continue,
            raw_score: None,
            smoothed_score: None,
        }
    }
}

/// The observer's final pick, as a position in the sequence of snapshots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Selection {
    pub step: Option<usize>,
    pub declared: bool,
}

/// Receives every snapshot synchronously from the loop.
pub trait Observer {
    fn observe(&mut self, iteration: usize, snapshot: &Image) -> Result<Verdict>;

    /// Called once after the loop ends. `None` selects the last snapshot.
    fn finish(&mut self) -> Result<Selection> {
        Ok(Selection::default())
    }
}

impl<F> Observer for F
where
    F: FnMut(usize, &Image) -> Result<Verdict>,
{
    fn observe(&mut self, iteration: usize, snapshot: &Image) -> Result<Verdict> {
        self(iteration, snapshot)
    }
}

/// Observer that never stops and records nothing.
pub struct Passive;

impl Observer for Passive {
    fn observe(&mut self, _: usize, _: &Image) -> Result<Verdict> {
        Ok(Verdict::proceed())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub raw_score: Option<f64>,
    pub smoothed_score: Option<f64>,
    /// Snapshot file name (`snap_{iteration:06}.png`), whether or not it was written.
    pub snapshot_ref: String,
    /// `l2_loss(snapshot, noisy)`.
    pub loss: f64,
    /// PSNR against the clean reference, when one was supplied.
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionTrace {
    pub entries: Vec<TraceEntry>,
    /// Iteration of the chosen snapshot.
    pub final_choice: usize,
    pub no_peak_declared: bool,
    pub stopped_early: bool,
    /// Training loss (against the padded reference) at every iteration.
    pub loss_curve: Vec<f64>,
}

impl ReconstructionTrace {
    pub fn iterations(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.iteration).collect()
    }
}

/// Where snapshots go and what survives the run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Write `snap_{iteration:06}.png` files here; `None` keeps snapshots in memory.
    pub snapshot_dir: Option<PathBuf>,
    /// Keep every snapshot file instead of only the chosen one.
    pub keep_all: bool,
    /// Clean image for reporting per-snapshot PSNR; never used for fitting or stopping.
    pub reference: Option<Image>,
}

pub struct Reconstruction {
    pub trace: ReconstructionTrace,
    pub state: NetworkState,
    /// The chosen snapshot (decoded from disk when snapshots are written as PNG).
    pub chosen: Image,
}

pub fn snapshot_name(iteration: usize) -> String {
    format!("snap_{iteration:06}.png")
}

/// `base + N(0, sigma²)`, freshly drawn; `base` is left untouched.
pub fn perturb_input(base: &Tensor, sigma: f32, rng: &mut impl Rng) -> Tensor {
    let mut out = base.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma).expect("sigma is finite and positive");
        for v in &mut out.data {
            *v += normal.sample(rng);
        }
    }
    out
}

/// Mean squared per-element difference.
pub fn l2_loss(output: &Image, reference: &Image) -> Result<f64> {
    output.same_shape(reference)?;
    Ok(mse(output.data(), reference.data()))
}

pub(crate) fn mse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Reflection-pads the bottom and right of an image to `hp × wp`, as a `1×3×hp×wp` tensor.
fn padded_reference(image: &Image, hp: usize, wp: usize) -> Tensor {
    let reflect = |p: usize, n: usize| source_index(p as isize, n, Padding::Reflect).expect("reflect");
    let mut t = Tensor::zeros(Shape::new(1, 3, hp, wp));
    for y in 0..hp {
        let sy = reflect(y, image.height());
        for x in 0..wp {
            let px = image.pixel(sy, reflect(x, image.width()));
            for (c, v) in px.iter().enumerate() {
                t.data[(c * hp + y) * wp + x] = *v;
            }
        }
    }
    t
}

enum SnapshotStore {
    Memory(BTreeMap<usize, Image>),
    Disk { dir: PathBuf, keep_all: bool },
}

impl SnapshotStore {
    fn put(&mut self, iteration: usize, image: &Image) -> Result<()> {
        match self {
            SnapshotStore::Memory(map) => {
                map.insert(iteration, image.clone());
                Ok(())
            }
            SnapshotStore::Disk { dir, .. } => image.save_png(dir.join(snapshot_name(iteration))),
        }
    }

    /// Returns the chosen snapshot and applies the retention policy.
    fn settle(self, chosen: usize, recorded: &[usize]) -> Result<Image> {
        match self {
            SnapshotStore::Memory(mut map) => Ok(map.remove(&chosen).expect("chosen snapshot recorded")),
            SnapshotStore::Disk { dir, keep_all } => {
                let image = Image::load(dir.join(snapshot_name(chosen)))?;
                if !keep_all {
                    for it in recorded.iter().filter(|it| **it != chosen) {
                        let path = dir.join(snapshot_name(*it));
                        fs::remove_file(&path).at(&path)?;
                    }
                }
                Ok(image)
            }
        }
    }
}

/// Fits the prior network to `noisy`, emitting a snapshot every `eval_every` iterations.
pub fn reconstruct(
    noisy: &Image,
    config: &DipConfig,
    warm_start: Option<&NetworkState>,
    observer: &mut dyn Observer,
) -> Result<Reconstruction> {
    reconstruct_with(noisy, config, warm_start, observer, &RunOptions::default())
}

pub fn reconstruct_with(
    noisy: &Image,
    config: &DipConfig,
    warm_start: Option<&NetworkState>,
    observer: &mut dyn Observer,
    options: &RunOptions,
) -> Result<Reconstruction> {
    config.validate()?;
    if let Some(reference) = &options.reference {
        noisy.same_shape(reference)?;
    }
    let (height, width) = (noisy.height(), noisy.width());
    let (hp, wp) = config.padded_size(height, width)?;

    let mut state = match warm_start {
        Some(prior) => {
            prior.check_compatible(config)?;
            let mut s = prior.clone();
            s.config = config.clone();
            let expected = Shape::new(1, config.input_channels, hp, wp);
            if s.base_input.shape != expected {
                s.base_input = base_input(config, config.seed, height, width)?;
            }
            s.image_height = height;
            s.image_width = width;
            s
        }
        None => build_network(config, config.seed, height, width)?,
    };
    let mut net = state.instantiate()?;
    let reference = padded_reference(noisy, hp, wp);
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = seeded(config.seed, STREAM_PERTURB);

    let mut store = match &options.snapshot_dir {
        Some(dir) => {
            fs::create_dir_all(dir).at(dir)?;
            SnapshotStore::Disk {
                dir: dir.clone(),
                keep_all: options.keep_all,
            }
        }
        None => SnapshotStore::Memory(BTreeMap::new()),
    };

    let mut entries = Vec::new();
    let mut loss_curve = Vec::with_capacity(config.max_iterations);
    let mut stopped_early = false;
    let scale = 2.0 / reference.data.len() as f32;

    for iteration in 1..=config.max_iterations {
        let input = perturb_input(&state.base_input, config.perturb_sigma, &mut rng);
        zero_grads(&mut net);
        let out = net.forward(input);
        let loss = mse(&out.data, &reference.data);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, loss });
        }
        loss_curve.push(loss);
        let grad = Tensor::from_vec(
            out.shape,
            out.data
                .iter()
                .zip(&reference.data)
                .map(|(o, r)| scale * (o - r))
                .collect(),
        );
        net.backward(grad);
        adam.step(&mut net.params_mut());

        if iteration % config.eval_every == 0 {
            let snapshot = crop_output(&out, height, width)?;
            store.put(iteration, &snapshot)?;
            let verdict = observer.observe(iteration, &snapshot).map_err(|e| match e {
                e @ Error::Observer { .. } => e,
                other => Error::Observer {
                    iteration,
                    message: other.to_string(),
                },
            })?;
            entries.push(TraceEntry {
                iteration,
                raw_score: verdict.raw_score,
                smoothed_score: verdict.smoothed_score,
                snapshot_ref: snapshot_name(iteration),
                loss: l2_loss(&snapshot, noisy)?,
                psnr: options.reference.as_ref().map(|r| compute_psnr(&snapshot, r)).transpose()?,
            });
            if verdict.control == Control::Stop {
                stopped_early = iteration < config.max_iterations;
                break;
            }
        }
    }
    net.clear_cache();

    let selection = observer.finish()?;
    let step = selection
        .step
        .unwrap_or(entries.len() - 1)
        .min(entries.len() - 1);
    let final_choice = entries[step].iteration;
    let recorded: Vec<usize> = entries.iter().map(|e| e.iteration).collect();
    let chosen = store.settle(final_choice, &recorded)?;

    state.weights = crate::nn::export_state(&net);
    Ok(Reconstruction {
        trace: ReconstructionTrace {
            entries,
            final_choice,
            no_peak_declared: !selection.declared,
            stopped_early,
            loss_curve,
        },
        state,
        chosen,
    })
}

/// Path of the snapshot for `iteration` inside a run directory.
pub fn snapshot_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(snapshot_name(iteration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DipConfig {
        let mut c = DipConfig::uniform(2, 4, 2);
        c.input_channels = 4;
        c.max_iterations = 20;
        c.eval_every = 5;
        c
    }

    fn gray(v: f32) -> Image {
        Image::filled(8, 8, v).unwrap()
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_loss(&gray(0.3), &gray(0.3)).unwrap(), 0.0);
        assert_eq!(l2_loss(&gray(0.0), &gray(1.0)).unwrap(), 1.0);
        assert!((l2_loss(&gray(0.4), &gray(0.5)).unwrap() - 0.01).abs() < 1e-8);
        let other = Image::filled(8, 9, 0.0).unwrap();
        assert!(matches!(l2_loss(&gray(0.0), &other), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_sigma_perturbation_is_identity_and_fresh_draws_differ() {
        let base = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.1, 0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb_input(&base, 0.0, &mut rng), base);
        let a = perturb_input(&base, 0.1, &mut rng);
        let b = perturb_input(&base, 0.1, &mut rng);
        assert_ne!(a, b);
        assert_eq!(base.data, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn perturbation_std_matches_sigma() {
        let base = Tensor::zeros(Shape::new(1, 1, 1000, 1000));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = 1.0f32 / 30.0;
        let out = perturb_input(&base, sigma, &mut rng);
        let n = out.data.len() as f64;
        let mean = out.data.iter().map(|v| f64::from(*v)).sum::<f64>() / n;
        let var = out.data.iter().map(|v| (f64::from(*v) - mean).powi(2)).sum::<f64>() / n;
        let rel = (var.sqrt() - f64::from(sigma)).abs() / f64::from(sigma);
        assert!(rel < 0.01, "relative std error {rel}");
    }

    #[test]
    fn reflection_padding_mirrors_edges() {
        let img = Image::from_fn(3, 2, |y, x| [(y * 2 + x) as f32 / 8.0, 0.0, 0.0]).unwrap();
        let t = padded_reference(&img, 5, 4);
        let row = |y: usize| -> Vec<f32> { (0..4).map(|x| t.data[y * 4 + x] * 8.0).collect() };
        assert_eq!(row(0), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(row(3), vec![2.0, 3.0, 2.0, 3.0]);
        assert_eq!(row(4), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn one_iteration_one_entry() {
        let mut c = tiny();
        c.max_iterations = 1;
        c.eval_every = 1;
        let r = reconstruct(&gray(0.5), &c, None, &mut Passive).unwrap();
        assert_eq!(r.trace.iterations(), vec![1]);
        assert_eq!(r.trace.final_choice, 1);
        assert!(r.trace.no_peak_declared);
    }

    #[test]
    fn observer_stop_ends_the_loop() {
        let mut seen = Vec::new();
        let mut obs = |it: usize, _: &Image| -> Result<Verdict> {
            seen.push(it);
            let control = if it >= 10 { Control::Stop } else { Control::Continue };
            Ok(Verdict { control, raw_score: Some(it as f64), smoothed_score: None })
        };
        let r = reconstruct(&gray(0.5), &tiny(), None, &mut obs).unwrap();
        assert_eq!(r.trace.iterations(), vec![5, 10]);
        assert!(r.trace.stopped_early);
        assert_eq!(r.trace.entries[1].raw_score, Some(10.0));
        assert_eq!(seen, vec![5, 10]);
    }

    #[test]
    fn observer_failure_propagates() {
        let mut obs = |it: usize, _: &Image| -> Result<Verdict> {
            Err(Error::Data(format!("boom at {it}")))
        };
        match reconstruct(&gray(0.5), &tiny(), None, &mut obs) {
            Err(Error::Observer { iteration: 5, message }) => assert!(message.contains("boom")),
            other => panic!("unexpected {:?}", other.map(|r| r.trace)),
        }
    }

    #[test]
    fn non_finite_learning_rate_blowup_is_reported() {
        let mut c = tiny();
        c.learning_rate = 1e30;
        c.max_iterations = 50;
        match reconstruct(&gray(0.5), &c, None, &mut Passive) {
            Err(Error::NonFiniteLoss { iteration, .. }) => assert!(iteration > 1),
            Ok(_) => panic!("expected a non-finite loss"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn disk_retention_keeps_only_the_choice() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { snapshot_dir: Some(dir.path().to_path_buf()), keep_all: false, reference: None };
        let r = reconstruct_with(&gray(0.5), &tiny(), None, &mut Passive, &opts).unwrap();
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files, vec![std::ffi::OsString::from("snap_000020.png")]);
        assert_eq!(r.chosen.height(), 8);

        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { snapshot_dir: Some(dir.path().to_path_buf()), keep_all: true, reference: None };
        reconstruct_with(&gray(0.5), &tiny(), None, &mut Passive, &opts).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 4);
    }

    #[test]
    fn warm_start_with_frozen_optimizer_reproduces_state_forward() {
        let mut c = tiny();
        let first = reconstruct(&gray(0.3), &c, None, &mut Passive).unwrap();
        c.perturb_sigma = 0.0;
        c.learning_rate = 0.0;
        c.max_iterations = 1;
        c.eval_every = 1;
        let again = reconstruct(&gray(0.7), &c, Some(&first.state), &mut Passive).unwrap();
        assert_eq!(again.chosen, first.state.forward().unwrap());
    }

    #[test]
    fn warm_start_rejects_other_architectures() {
        let first = reconstruct(&gray(0.3), &tiny(), None, &mut Passive).unwrap();
        let mut other = tiny();
        other.filters_up = vec![5, 5];
        assert!(matches!(
            reconstruct(&gray(0.3), &other, Some(&first.state), &mut Passive),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped_back() {
        let img = Image::filled(9, 11, 0.5).unwrap();
        let r = reconstruct(&img, &tiny(), None, &mut Passive).unwrap();
        assert_eq!((r.chosen.height(), r.chosen.width()), (9, 11));
    }
}
