//! Pair manifests, co-registered crops, corpus building and PSNR reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dip::{reconstruct_with, DipConfig, RunOptions, Verdict};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::labels::{compute_psnr, label_corpus, LabelGenConfig, LabelInput};
use crate::quality::{ScoreDistribution, TrainingCorpus, TrainingExample};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const CORPUS_MANIFEST: &str = "corpus.jsonl";

/// One noisy image and, optionally, its clean reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub noisy_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_tag: Option<String>,
}

/// A list of pairs, stored as one JSON object per line.
///
/// Relative paths are resolved against the manifest's directory on load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairManifest {
    pub records: Vec<PairRecord>,
}

/// Ids name run directories, so they must be plain file names.
fn check_id(id: &str) -> std::result::Result<(), String> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
        return Err(format!("id {id:?} is not usable as a directory name"));
    }
    Ok(())
}

impl PairManifest {
    pub fn new(records: Vec<PairRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            check_id(&r.id).map_err(Error::Data)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate pair id {:?}", r.id)));
            }
        }
        Ok(Self { records })
    }

    pub fn get(&self, id: &str) -> Option<&PairRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Errors unless every record names a clean image.
    pub fn require_clean(&self) -> Result<()> {
        match self.records.iter().find(|r| r.clean_path.is_none()) {
            Some(r) => Err(Error::Data(format!("pair {:?} has no clean image", r.id))),
            None => Ok(()),
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<PairManifest> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let file = fs::File::open(path).at(path)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let mut r: PairRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        check_id(&r.id).map_err(malformed)?;
        if !seen.insert(r.id.clone()) {
            return Err(malformed(format!("duplicate id {:?}", r.id)));
        }
        r.noisy_path = base.join(&r.noisy_path);
        if !r.noisy_path.is_file() {
            return Err(malformed(format!("noisy image {} not found", r.noisy_path.display())));
        }
        r.clean_path = r.clean_path.map(|p| base.join(p));
        records.push(r);
    }
    Ok(PairManifest { records })
}

/// Writes the manifest with paths as given.
pub fn save_manifest(manifest: &PairManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).at(path)
}

/// `count` distinct top-left offsets of `size × size` windows, drawn from `seed`.
pub fn crop_offsets(height: usize, width: usize, size: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if size == 0 || height < size || width < size {
        return Err(Error::InvalidImage(format!(
            "{height}x{width} image cannot hold a {size}x{size} crop"
        )));
    }
    let positions = (height - size + 1) * (width - size + 1);
    if count > positions {
        return Err(Error::InvalidConfig {
            field: "count",
            reason: format!("{count} crops requested but only {positions} positions exist"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let offset = (rng.random_range(0..=height - size), rng.random_range(0..=width - size));
        if seen.insert(offset) {
            out.push(offset);
        }
    }
    Ok(out)
}

pub fn crop_regions(image: &Image, size: usize, count: usize, seed: u64) -> Result<Vec<Image>> {
    crop_offsets(image.height(), image.width(), size, count, seed)?
        .into_iter()
        .map(|(y, x)| image.crop(y, x, size, size))
        .collect()
}

/// Crops `(clean, noisy)` at identical offsets.
pub fn crop_pair(clean: &Image, noisy: &Image, size: usize, count: usize, seed: u64) -> Result<Vec<(Image, Image)>> {
    clean.same_shape(noisy)?;
    crop_offsets(clean.height(), clean.width(), size, count, seed)?
        .into_iter()
        .map(|(y, x)| Ok((clean.crop(y, x, size, size)?, noisy.crop(y, x, size, size)?)))
        .collect()
}

/// A seed for one named item, independent of processing order.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let digest = Sha256::new_with_prefix(seed.to_le_bytes()).chain_update(key.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub size: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub dip: DipConfig,
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
    /// Crop each pair into this many regions; `None` uses whole images.
    pub crop: Option<CropSpec>,
    /// Worker threads; 0 picks the available parallelism.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            dip: DipConfig::default(),
            sigma: crate::labels::DEFAULT_SIGMA,
            samples: crate::labels::DEFAULT_SAMPLES,
            seed: 0,
            crop: None,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub source_id: String,
    pub iteration: usize,
    /// Relative to the corpus directory.
    pub snapshot_path: PathBuf,
    /// PSNR of the float snapshot against the clean patch; labels use this value.
    pub psnr: f64,
    /// PSNR of the stored 8-bit snapshot.
    pub psnr_quantized: f64,
    pub mu: f64,
    pub target: ScoreDistribution,
}

/// First line of `corpus.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format_version: u32,
    pub label_config: LabelGenConfig,
    pub options: CorpusOptions,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dir: PathBuf,
    pub header: CorpusHeader,
    pub records: Vec<CorpusRecord>,
}

/// Result of [`build_corpus`]; failed sources are left out of the corpus.
#[derive(Debug)]
pub struct CorpusBuild {
    pub corpus: Corpus,
    /// Sources computed by this call (the rest were already complete).
    pub computed: Vec<String>,
    pub failures: Vec<(String, String)>,
}

/// Per-source output kept next to its snapshots so interrupted builds can resume.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SourceDone {
    source_id: String,
    snapshots: Vec<SnapshotPsnr>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SnapshotPsnr {
    iteration: usize,
    psnr: f64,
    psnr_quantized: f64,
}

const DONE_FILE: &str = "done.json";

/// One clean/noisy image (or co-registered crop) taken from a pair.
#[derive(Clone, Debug)]
pub struct PairSource {
    /// The pair id, suffixed `_c{k}` for the k-th crop.
    pub id: String,
    pub clean: Image,
    pub noisy: Image,
}

fn run_dir(out_dir: &Path, source_id: &str) -> PathBuf {
    out_dir.join("runs").join(source_id)
}

/// Loads a pair and splits it into crops when `crop` is set; offsets are seeded by `seed` and the pair id.
pub fn load_pair_sources(pair: &PairRecord, crop: Option<CropSpec>, seed: u64) -> Result<Vec<PairSource>> {
    let clean_path = pair
        .clean_path
        .as_ref()
        .ok_or_else(|| Error::Data(format!("pair {:?} has no clean image", pair.id)))?;
    let clean = Image::load(clean_path)?;
    let noisy = Image::load(&pair.noisy_path)?;
    clean.same_shape(&noisy)?;
    Ok(match crop {
        None => vec![PairSource {
            id: pair.id.clone(),
            clean,
            noisy,
        }],
        Some(spec) => crop_pair(&clean, &noisy, spec.size, spec.count, derive_seed(seed, &pair.id))?
            .into_iter()
            .enumerate()
            .map(|(k, (clean, noisy))| PairSource {
                id: format!("{}_c{k}", pair.id),
                clean,
                noisy,
            })
            .collect(),
    })
}

fn run_source(source: &PairSource, options: &CorpusOptions, out_dir: &Path) -> Result<SourceDone> {
    let dir = run_dir(out_dir, &source.id);
    fs::create_dir_all(&dir).at(&dir)?;
    source.clean.save_png(dir.join("clean.png"))?;
    source.noisy.save_png(dir.join("noisy.png"))?;
    let mut config = options.dip.clone();
    config.seed = derive_seed(options.dip.seed, &source.id);
    let mut snapshots = Vec::new();
    let mut observer = |iteration: usize, snapshot: &Image| -> Result<Verdict> {
        snapshots.push(SnapshotPsnr {
            iteration,
            psnr: compute_psnr(snapshot, &source.clean)?,
            psnr_quantized: compute_psnr(&snapshot.quantized(), &source.clean)?,
        });
        Ok(Verdict::proceed())
    };
    let run = RunOptions {
        snapshot_dir: Some(dir.clone()),
        keep_all: true,
        reference: None,
    };
    reconstruct_with(&source.noisy, &config, None, &mut observer, &run)?;
    let done = SourceDone {
        source_id: source.id.clone(),
        snapshots,
    };
    let tmp = dir.join("done.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&done)?).at(&tmp)?;
    fs::rename(&tmp, dir.join(DONE_FILE)).at(&dir)?;
    Ok(done)
}

fn read_done(out_dir: &Path, source_id: &str) -> Option<SourceDone> {
    let bytes = fs::read(run_dir(out_dir, source_id).join(DONE_FILE)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Runs the prior network on every pair (or crop), labels every snapshot and
/// writes `corpus.jsonl`. Sources with a completed run directory are reused.
pub fn build_corpus(pairs: &PairManifest, options: &CorpusOptions, out_dir: impl AsRef<Path>) -> Result<CorpusBuild> {
    let out_dir = out_dir.as_ref();
    pairs.require_clean()?;
    options.dip.validate()?;
    fs::create_dir_all(out_dir).at(out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::Data(format!("thread pool: {e}")))?;
    let outcomes: Vec<(String, Result<(Vec<SourceDone>, Vec<String>)>)> = pool.install(|| {
        use rayon::prelude::*;
        pairs
            .records
            .par_iter()
            .map(|pair| {
                let result = load_pair_sources(pair, options.crop, options.seed).and_then(|sources| {
                    let mut done = Vec::new();
                    let mut computed = Vec::new();
                    for s in &sources {
                        match read_done(out_dir, &s.id) {
                            Some(d) => done.push(d),
                            None => {
                                done.push(run_source(s, options, out_dir)?);
                                computed.push(s.id.clone());
                            }
                        }
                    }
                    Ok((done, computed))
                });
                (pair.id.clone(), result)
            })
            .collect()
    });

    let mut done = Vec::new();
    let mut computed = Vec::new();
    let mut failures = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok((d, c)) => {
                done.extend(d);
                computed.extend(c);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }

    let inputs: Vec<LabelInput> = done
        .iter()
        .flat_map(|d| {
            d.snapshots.iter().map(|s| LabelInput {
                key: format!("{}@{}", d.source_id, s.iteration),
                psnr: s.psnr,
            })
        })
        .collect();
    let psnrs: Vec<f64> = inputs.iter().map(|i| i.psnr).collect();
    let label_config = LabelGenConfig::for_corpus(&psnrs, options.sigma, options.samples, options.seed)?;
    let labels = label_corpus(&inputs, &label_config)?;

    let mut records = Vec::with_capacity(labels.len());
    let mut labels = labels.into_iter();
    for d in &done {
        for s in &d.snapshots {
            let label = labels.next().expect("one label per snapshot");
            records.push(CorpusRecord {
                source_id: d.source_id.clone(),
                iteration: s.iteration,
                snapshot_path: Path::new("runs").join(&d.source_id).join(crate::dip::snapshot_name(s.iteration)),
                psnr: s.psnr,
                psnr_quantized: s.psnr_quantized,
                mu: label.mu,
                target: label.target,
            });
        }
    }
    let header = CorpusHeader {
        format_version: CORPUS_FORMAT_VERSION,
        label_config,
        options: options.clone(),
        sources: done.iter().map(|d| d.source_id.clone()).collect(),
    };
    let corpus = Corpus {
        dir: out_dir.to_path_buf(),
        header,
        records,
    };
    write_corpus(&corpus)?;
    Ok(CorpusBuild {
        corpus,
        computed,
        failures,
    })
}

fn write_corpus(corpus: &Corpus) -> Result<()> {
    let path = corpus.dir.join(CORPUS_MANIFEST);
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &corpus.header)?;
    out.push(b'\n');
    for r in &corpus.records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(&path).at(&path)?;
    file.write_all(&out).at(&path)
}

/// Reads `corpus.jsonl` from a corpus directory.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let path = dir.join(CORPUS_MANIFEST);
    let file = fs::File::open(&path).at(&path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let malformed = |line: usize, reason: String| Error::Malformed {
        path: path.clone(),
        line,
        reason,
    };
    let header: CorpusHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line.at(&path)?).map_err(|e| malformed(1, e.to_string()))?,
        None => return Err(malformed(1, "missing header".into())),
    };
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            expected: CORPUS_FORMAT_VERSION,
            found: header.format_version,
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.at(&path)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?);
    }
    Ok(Corpus {
        dir: dir.to_path_buf(),
        header,
        records,
    })
}

impl Corpus {
    /// Hash of the manifest contents, recorded in trained models.
    pub fn id(&self) -> Result<String> {
        let path = self.dir.join(CORPUS_MANIFEST);
        let bytes = fs::read(&path).at(&path)?;
        Ok(Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Loads every snapshot for training.
    pub fn to_training(&self) -> Result<TrainingCorpus> {
        let examples = self
            .records
            .iter()
            .map(|r| {
                Ok(TrainingExample {
                    source_id: r.source_id.clone(),
                    image: Image::load(self.dir.join(&r.snapshot_path))?,
                    target: r.target.clone(),
                    psnr: r.psnr,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainingCorpus {
            id: self.id()?,
            min_psnr: self.header.label_config.min_psnr,
            max_psnr: self.header.label_config.max_psnr,
            examples,
        })
    }
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub id: String,
    pub camera_tag: Option<String>,
    /// PSNR of the automatically chosen snapshot.
    pub psnr: f64,
    /// Best PSNR over all snapshots of the run.
    pub best_psnr: f64,
    pub chosen_iteration: usize,
    pub no_peak_declared: bool,
}

/// CSV of per-image rows grouped by camera (in first-seen order), then an average row.
pub fn write_report(results: &[EvalResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut groups: BTreeMap<usize, Vec<&EvalResult>> = BTreeMap::new();
    let mut order: Vec<Option<&str>> = Vec::new();
    for r in results {
        let tag = r.camera_tag.as_deref();
        let slot = match order.iter().position(|t| *t == tag) {
            Some(i) => i,
            None => {
                order.push(tag);
                order.len() - 1
            }
        };
        groups.entry(slot).or_default().push(r);
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["camera", "image", "psnr_db", "best_psnr_db", "chosen_iteration", "no_peak_declared"])?;
    for r in groups.values().flatten() {
        w.write_record([
            r.camera_tag.clone().unwrap_or_default(),
            r.id.clone(),
            format!("{:.4}", r.psnr),
            format!("{:.4}", r.best_psnr),
            r.chosen_iteration.to_string(),
            r.no_peak_declared.to_string(),
        ])?;
    }
    if results.is_empty() {
        w.write_record(["average", "", "NA", "NA", "", ""])?;
    } else {
        let n = results.len() as f64;
        w.write_record([
            "average".to_string(),
            String::new(),
            format!("{:.4}", results.iter().map(|r| r.psnr).sum::<f64>() / n),
            format!("{:.4}", results.iter().map(|r| r.best_psnr).sum::<f64>() / n),
            String::new(),
            String::new(),
        ])?;
    }
    w.flush().at(path)
}
