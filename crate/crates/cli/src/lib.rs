//! The `dipstop` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 success through
//! the backstop (no stop was declared and the global fallback picked the
//! snapshot).

pub mod settings;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dipstop::data::{
    build_corpus, load_corpus, load_manifest, load_pair_sources, save_manifest, write_report, CorpusOptions,
    EvalResult, PairManifest, PairRecord,
};
use dipstop::dip::{load_state_for, save_state, NetworkState, ReconstructionTrace, RunOptions};
use dipstop::pipeline::{denoise, warmstart_study, StudyOptions, StudyPair};
use dipstop::quality::{load_model, pretrain_backbone, save_backbone, save_model, train_biqan, BackboneSource, BiqanModel};
use dipstop::stop::StopDecision;
use dipstop::synthetic::noisy_pair;
use dipstop::Image;
use serde::Serialize;

use settings::{Overrides, Settings, KEYS};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FALLBACK: u8 = 3;

/// Version of the `trace.json` layout.
pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "dipstop", version, about = "Blind denoising with a deep image prior and a learned stopping rule")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Denoise one image, stopping where the quality model's score peaks.
    Denoise(DenoiseArgs),
    /// Run the prior network on every pair and label each snapshot by its PSNR.
    MakeCorpus(MakeCorpusArgs),
    /// Train the quality model on a corpus.
    Train(TrainArgs),
    /// Denoise every pair with automatic stopping and write a PSNR report.
    Evaluate(EvaluateArgs),
    /// Compare cold and warm-started runs on every pair.
    WarmstartStudy(StudyArgs),
    /// Pretrain a quality-model backbone on synthetic degradations.
    PretrainBackbone(PretrainArgs),
    /// Write synthetic clean/noisy pairs and their manifest.
    Synth(SynthArgs),
    /// List configuration keys.
    Keys,
}

/// Flags shared by every command; they override the `--config` file.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// Configuration file of `key = value` lines (see `dipstop keys`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub smoothing_window: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub search_radius: Option<usize>,
    #[arg(long)]
    pub min_evals: Option<usize>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    pub noisy: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Network state to start from instead of a fresh initialization.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Clean image; only used to report per-snapshot PSNR in the trace.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Keep every snapshot instead of only the chosen one.
    #[arg(long)]
    pub keep_all: bool,
    /// Also write `score_curve.csv`.
    #[arg(long)]
    pub score_curve: bool,
    /// Save the final network state here (usable as a later `--warm-start`).
    #[arg(long)]
    pub save_state: Option<PathBuf>,
    #[arg(long, default_value = "denoise-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct MakeCorpusArgs {
    /// Pair manifest (JSONL).
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory written by `make-corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pretrained backbone weights; a seeded random backbone is used otherwise.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Model weights file; metadata goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub keep_all: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Id of the pair whose noisy image trains the warm-start weights.
    #[arg(long)]
    pub typical: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Backbone weights file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long, default_value_t = 25.0)]
    pub noise_sigma: f32,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<dipstop::Error> for Failure {
    fn from(e: dipstop::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<settings::SettingsError> for Failure {
    fn from(e: settings::SettingsError) -> Self {
        Failure::Usage(e.0)
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// How a successful command ended.
#[derive(Debug, PartialEq, Eq)]
pub enum Finished {
    Ok,
    Fallback,
}

impl Common {
    pub fn settings(&self) -> Result<Settings, Failure> {
        let mut layers = match &self.config {
            Some(path) => Overrides::load_file(path)?,
            None => Overrides::default(),
        };
        let mut cli = Overrides::default();
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("max_iterations", self.max_iters.map(|v| v.to_string())),
            ("eval_every", self.eval_every.map(|v| v.to_string())),
            ("smoothing_window", self.smoothing_window.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("search_radius", self.search_radius.map(|v| v.to_string())),
            ("min_evals", self.min_evals.map(|v| v.to_string())),
        ];
        for pair in &self.set {
            cli.set_pair(pair)?;
        }
        for (key, value) in flags {
            if let Some(v) = value {
                cli.set(key, v)?;
            }
        }
        layers.merge(cli);
        Ok(layers.resolve()?)
    }
}

/// Parses `args` (including the program name), runs the command and maps the outcome to an exit code.
pub fn main_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(Finished::Ok) => ExitCode::SUCCESS,
        Ok(Finished::Fallback) => ExitCode::from(EXIT_FALLBACK),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

pub fn run(command: Command) -> Result<Finished, Failure> {
    match command {
        Command::Denoise(a) => cmd_denoise(&a),
        Command::MakeCorpus(a) => cmd_make_corpus(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::WarmstartStudy(a) => cmd_warmstart_study(&a),
        Command::PretrainBackbone(a) => cmd_pretrain(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Keys => {
            for (key, help) in KEYS {
                println!("{key:<24} {help}");
            }
            Ok(Finished::Ok)
        }
    }
}

/// Summary of the chosen snapshot, with PSNR fields when a reference was given.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub chosen_iteration: usize,
    pub scored_steps: usize,
    pub declared: bool,
    pub stopped_early: bool,
    pub chosen_psnr: Option<f64>,
    pub best_psnr: Option<f64>,
    pub best_iteration: Option<usize>,
}

impl Outcome {
    fn from_trace(trace: &ReconstructionTrace) -> Self {
        let chosen = trace.entries.iter().find(|e| e.iteration == trace.final_choice);
        let best = trace
            .entries
            .iter()
            .filter_map(|e| e.psnr.map(|p| (p, e.iteration)))
            .fold(None, |b: Option<(f64, usize)>, (p, it)| match b {
                Some((bp, _)) if bp >= p => b,
                _ => Some((p, it)),
            });
        Self {
            chosen_iteration: trace.final_choice,
            scored_steps: trace.entries.len(),
            declared: !trace.no_peak_declared,
            stopped_early: trace.stopped_early,
            chosen_psnr: chosen.and_then(|e| e.psnr),
            best_psnr: best.map(|b| b.0),
            best_iteration: best.map(|b| b.1),
        }
    }
}

/// Contents of `trace.json`. Deterministic for fixed inputs and settings.
#[derive(Serialize)]
struct TraceDocument<'a> {
    format_version: u32,
    inputs: &'a BTreeMap<&'static str, String>,
    config: &'a Settings,
    outcome: &'a Outcome,
    decision: &'a StopDecision,
    trace: &'a ReconstructionTrace,
}

struct Job<'a> {
    noisy: &'a Image,
    reference: Option<&'a Image>,
    inputs: BTreeMap<&'static str, String>,
    out: &'a Path,
    keep_all: bool,
    score_curve: bool,
}

/// Denoises one image into `job.out`: `denoised.png`, `trace.json`, snapshots and optionally `score_curve.csv`.
fn denoise_into(
    job: &Job<'_>,
    model: &BiqanModel,
    settings: &Settings,
    warm: Option<&NetworkState>,
) -> Result<(Outcome, NetworkState), Failure> {
    fs::create_dir_all(job.out).map_err(|e| io_failure(job.out, e))?;
    let options = RunOptions {
        snapshot_dir: Some(job.out.join("snapshots")),
        keep_all: job.keep_all,
        reference: job.reference.cloned(),
    };
    let result = denoise(job.noisy, model, &settings.dip, &settings.stop, warm, &options)?;
    let trace = &result.reconstruction.trace;
    result.reconstruction.chosen.save_png(job.out.join("denoised.png"))?;
    let outcome = Outcome::from_trace(trace);
    let doc = TraceDocument {
        format_version: TRACE_FORMAT_VERSION,
        inputs: &job.inputs,
        config: settings,
        outcome: &outcome,
        decision: &result.decision,
        trace,
    };
    let path = job.out.join("trace.json");
    let json = serde_json::to_vec_pretty(&doc).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(&path, json).map_err(|e| io_failure(&path, e))?;
    if job.score_curve {
        write_score_curve(trace, &job.out.join("score_curve.csv"))?;
    }
    Ok((outcome, result.reconstruction.state))
}

fn write_score_curve(trace: &ReconstructionTrace, path: &Path) -> Result<(), Failure> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("iteration,raw_score,smoothed_score,loss,psnr\n");
    for e in &trace.entries {
        out.push_str(&format!(
            "{},{},{},{:.8},{}\n",
            e.iteration,
            opt(e.raw_score),
            opt(e.smoothed_score),
            e.loss,
            opt(e.psnr)
        ));
    }
    fs::write(path, out).map_err(|e| io_failure(path, e))
}

fn load_warm_start(path: Option<&PathBuf>, settings: &Settings) -> Result<Option<NetworkState>, Failure> {
    path.map(|p| load_state_for(p, &settings.dip)).transpose().map_err(Into::into)
}

fn cmd_denoise(a: &DenoiseArgs) -> Result<Finished, Failure> {
    let settings = a.common.settings()?;
    let model = load_model(&a.model)?;
    let noisy = Image::load(&a.noisy)?;
    let reference = a.reference.as_ref().map(Image::load).transpose()?;
    let warm = load_warm_start(a.warm_start.as_ref(), &settings)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("noisy", a.noisy.display().to_string());
    inputs.insert("model", a.model.display().to_string());
    if let Some(p) = &a.warm_start {
        inputs.insert("warm_start", p.display().to_string());
    }
    if let Some(p) = &a.reference {
        inputs.insert("reference", p.display().to_string());
    }
    let job = Job {
        noisy: &noisy,
        reference: reference.as_ref(),
        inputs,
        out: &a.out,
        keep_all: a.keep_all,
        score_curve: a.score_curve,
    };
    let (outcome, state) = denoise_into(&job, &model, &settings, warm.as_ref())?;
    if let Some(path) = &a.save_state {
        save_state(&state, path)?;
    }

    let how = if outcome.declared { "peak declared" } else { "no peak declared, global fallback" };
    print!(
        "chose iteration {} of {} scored steps ({how})",
        outcome.chosen_iteration, outcome.scored_steps
    );
    if let (Some(c), Some(b)) = (outcome.chosen_psnr, outcome.best_psnr) {
        print!("; PSNR {c:.2} dB, best in trace {b:.2} dB");
    }
    println!();
    Ok(if outcome.declared { Finished::Ok } else { Finished::Fallback })
}

fn cmd_make_corpus(a: &MakeCorpusArgs) -> Result<Finished, Failure> {
    let settings = a.common.settings()?;
    let pairs = load_manifest(&a.pairs)?;
    let options = CorpusOptions {
        dip: settings.dip.clone(),
        sigma: settings.labels.sigma,
        samples: settings.labels.samples,
        seed: settings.seed,
        crop: settings.crop,
        jobs: a.jobs,
    };
    let build = build_corpus(&pairs, &options, &a.out)?;
    println!(
        "{} records from {} sources ({} computed, {} reused) in {}",
        build.corpus.records.len(),
        build.corpus.header.sources.len(),
        build.computed.len(),
        build.corpus.header.sources.len() - build.computed.len(),
        a.out.display()
    );
    for (id, reason) in &build.failures {
        eprintln!("pair {id} skipped: {reason}");
    }
    if build.failures.is_empty() {
        Ok(Finished::Ok)
    } else {
        Err(Failure::Runtime(format!("{} pairs failed", build.failures.len())))
    }
}

fn cmd_train(a: &TrainArgs) -> Result<Finished, Failure> {
    let settings = a.common.settings()?;
    let corpus = load_corpus(&a.corpus)?.to_training()?;
    let source = match &a.backbone {
        Some(p) => BackboneSource::Pretrained(p.clone()),
        None => BackboneSource::Random {
            config: settings.backbone,
            seed: settings.seed,
        },
    };
    let model = train_biqan(&corpus, &settings.train, &source, settings.seed, &mut |log, _| {
        let val = log.val_loss.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into());
        eprintln!("stage {} epoch {:>3}: train {:.5} val {val}", log.stage, log.epoch, log.train_loss);
    })?;
    save_model(&model, &a.out)?;
    println!("model written to {}", a.out.display());
    Ok(Finished::Ok)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Finished, Failure> {
    let settings = a.common.settings()?;
    let model = load_model(&a.model)?;
    let pairs = load_manifest(&a.pairs)?;
    pairs.require_clean()?;
    let warm = load_warm_start(a.warm_start.as_ref(), &settings)?;

    let mut sources = Vec::new();
    for pair in &pairs.records {
        for s in load_pair_sources(pair, settings.crop, settings.seed)? {
            sources.push((pair, s));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let outcomes: Vec<(String, Result<EvalResult, Failure>)> = pool.install(|| {
        use rayon::prelude::*;
        sources
            .par_iter()
            .map(|(pair, s)| {
                let mut inputs = BTreeMap::new();
                inputs.insert("pair", pair.id.clone());
                inputs.insert("source", s.id.clone());
                let out = a.out.join("runs").join(&s.id);
                let job = Job {
                    noisy: &s.noisy,
                    reference: Some(&s.clean),
                    inputs,
                    out: &out,
                    keep_all: a.keep_all,
                    score_curve: true,
                };
                let result = denoise_into(&job, &model, &settings, warm.as_ref()).map(|(o, _)| EvalResult {
                    id: s.id.clone(),
                    camera_tag: pair.camera_tag.clone(),
                    psnr: o.chosen_psnr.expect("reference supplied"),
                    best_psnr: o.best_psnr.expect("reference supplied"),
                    chosen_iteration: o.chosen_iteration,
                    no_peak_declared: !o.declared,
                });
                (s.id.clone(), result)
            })
            .collect()
    });

    let mut results = Vec::new();
    let mut failed = 0;
    for (id, r) in outcomes {
        match r {
            Ok(r) => {
                eprintln!("{id}: {:.2} dB at iteration {} (best {:.2} dB)", r.psnr, r.chosen_iteration, r.best_psnr);
                results.push(r);
            }
            Err(Failure::Runtime(msg) | Failure::Usage(msg)) => {
                eprintln!("{id} failed: {msg}");
                failed += 1;
            }
        }
    }
    let report = a.out.join("report.csv");
    write_report(&results, &report)?;
    println!("report written to {}", report.display());
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} images failed")));
    }
    Ok(Finished::Ok)
}

fn cmd_warmstart_study(a: &StudyArgs) -> Result<Finished, Failure> {
    let settings = a.common.settings()?;
    let manifest = load_manifest(&a.pairs)?;
    let typical = manifest
        .get(&a.typical)
        .ok_or_else(|| Failure::Runtime(format!("typical id {:?} is not in {}", a.typical, a.pairs.display())))?;
    let typical_noisy = Image::load(&typical.noisy_path)?;
    let others = PairManifest::new(manifest.records.iter().filter(|r| r.id != a.typical).cloned().collect())?;
    if others.records.is_empty() {
        return Err(Failure::Runtime("the study needs at least one pair besides the typical one".into()));
    }
    others.require_clean()?;
    let mut images = Vec::new();
    for r in &others.records {
        let clean = Image::load(r.clean_path.as_ref().expect("checked above"))?;
        let noisy = Image::load(&r.noisy_path)?;
        images.push((r.id.as_str(), clean, noisy));
    }
    let pairs: Vec<StudyPair<'_>> = images
        .iter()
        .map(|(id, clean, noisy)| StudyPair { id, clean, noisy })
        .collect();
    let options = StudyOptions {
        dip: settings.dip.clone(),
        typical_iterations: settings.study.typical_iterations.unwrap_or(settings.dip.max_iterations),
        tolerance_db: settings.study.tolerance_db,
    };
    let report = warmstart_study(&a.typical, &typical_noisy, &pairs, &options)?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let path = a.out.join("study.json");
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(&path, json).map_err(|e| io_failure(&path, e))?;
    for p in &report.pairs {
        let warm = p.warm_steps_to_target.map(|s| s.to_string()).unwrap_or_else(|| "never".into());
        println!(
            "{}: cold {} steps, warm {warm} steps, best PSNR {:+.2} dB",
            p.id, p.cold_steps_to_target, p.best_psnr_delta
        );
    }
    println!(
        "warm faster on {}/{} pairs; scored steps reduced by {:.1}%",
        report.warm_faster_count,
        report.pairs.len(),
        100.0 * report.reduction_ratio
    );
    Ok(Finished::Ok)
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<Finished, Failure> {
    let settings = a.common.settings()?;
    let backbone = pretrain_backbone(&settings.pretrain, &mut |log| {
        eprintln!("epoch {:>3}: loss {:.4} accuracy {:.3}", log.epoch, log.loss, log.accuracy);
    })?;
    save_backbone(&backbone, &a.out)?;
    println!("backbone written to {}", a.out.display());
    Ok(Finished::Ok)
}

fn cmd_synth(a: &SynthArgs) -> Result<Finished, Failure> {
    let settings = a.common.settings()?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let mut records = Vec::new();
    for k in 0..a.count {
        let seed = settings.seed.wrapping_add(k as u64);
        let (clean, noisy) = noisy_pair(a.size, a.size, a.noise_sigma / 255.0, seed)?;
        let (c, n) = (format!("clean_{k:03}.png"), format!("noisy_{k:03}.png"));
        clean.save_png(a.out.join(&c))?;
        noisy.save_png(a.out.join(&n))?;
        records.push(PairRecord {
            id: format!("syn{k:03}"),
            noisy_path: n.into(),
            clean_path: Some(c.into()),
            camera_tag: Some("synthetic".into()),
        });
    }
    let path = a.out.join("pairs.jsonl");
    save_manifest(&PairManifest::new(records)?, &path)?;
    println!("{} pairs written to {}", a.count, path.display());
    Ok(Finished::Ok)
}
