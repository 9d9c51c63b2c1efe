use std::fs;
use std::path::Path;

use dipstop::data::{
    build_corpus, load_corpus, load_manifest, save_manifest, CorpusOptions, CropSpec, PairManifest,
    PairRecord,
};
use dipstop::dip::DipConfig;
use dipstop::labels::{compute_psnr, label_corpus, LabelInput};
use dipstop::synthetic::noisy_pair;
use dipstop::Image;

fn small_dip() -> DipConfig {
    let mut c = DipConfig::uniform(3, 8, 2);
    c.input_channels = 8;
    c.max_iterations = 200;
    c.eval_every = 10;
    c
}

fn write_pairs(dir: &Path, seeds: &[u64]) -> PairManifest {
    let records = seeds
        .iter()
        .map(|&seed| {
            let (clean, noisy) = noisy_pair(32, 32, 25.0 / 255.0, seed).unwrap();
            clean.save_png(dir.join(format!("clean_{seed}.png"))).unwrap();
            noisy.save_png(dir.join(format!("noisy_{seed}.png"))).unwrap();
            PairRecord {
                id: format!("p{seed}"),
                noisy_path: format!("noisy_{seed}.png").into(),
                clean_path: Some(format!("clean_{seed}.png").into()),
                camera_tag: Some("synthetic".into()),
            }
        })
        .collect();
    let manifest = PairManifest::new(records).unwrap();
    save_manifest(&manifest, dir.join("pairs.jsonl")).unwrap();
    load_manifest(dir.join("pairs.jsonl")).unwrap()
}

fn options() -> CorpusOptions {
    CorpusOptions {
        dip: small_dip(),
        samples: 2_000,
        ..CorpusOptions::default()
    }
}

#[test]
fn corpus_has_one_record_per_snapshot_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = write_pairs(tmp.path(), &[1, 2]);
    let out = tmp.path().join("corpus");

    let first = build_corpus(&pairs, &options(), &out).unwrap();
    assert!(first.failures.is_empty());
    assert_eq!(first.computed, vec!["p1".to_string(), "p2".to_string()]);
    let corpus = load_corpus(&out).unwrap();
    assert_eq!(corpus.records.len(), 2 * 200 / 10);
    assert_eq!(corpus.records, first.corpus.records);
    assert_eq!(corpus.header.label_config, first.corpus.header.label_config);
    let iters: Vec<usize> = corpus.records.iter().filter(|r| r.source_id == "p1").map(|r| r.iteration).collect();
    assert_eq!(iters.len(), 20);
    assert!(iters.windows(2).all(|w| w[1] - w[0] == 10));

    // Every stored snapshot reproduces its recorded PSNR.
    for r in &corpus.records {
        let snap = Image::load(out.join(&r.snapshot_path)).unwrap();
        let clean = Image::load(tmp.path().join(format!("clean_{}.png", &r.source_id[1..]))).unwrap();
        let psnr = compute_psnr(&snap, &clean).unwrap();
        assert!((psnr - r.psnr_quantized).abs() < 1e-6, "{} vs {}", psnr, r.psnr_quantized);
    }

    // A complete run directory is reused; a missing one is recomputed identically.
    let again = build_corpus(&pairs, &options(), &out).unwrap();
    assert!(again.computed.is_empty());
    assert_eq!(again.corpus.records, corpus.records);
    fs::remove_file(out.join("runs/p2/done.json")).unwrap();
    let partial = build_corpus(&pairs, &options(), &out).unwrap();
    assert_eq!(partial.computed, vec!["p2".to_string()]);
    assert_eq!(partial.corpus.records, corpus.records);
}

#[test]
fn labels_regenerate_from_the_header() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = write_pairs(tmp.path(), &[3]);
    let mut opts = options();
    opts.dip.max_iterations = 60;
    let corpus = build_corpus(&pairs, &opts, tmp.path().join("c")).unwrap().corpus;

    let inputs: Vec<LabelInput> = corpus
        .records
        .iter()
        .map(|r| LabelInput {
            key: format!("{}@{}", r.source_id, r.iteration),
            psnr: r.psnr,
        })
        .collect();
    let labels = label_corpus(&inputs, &corpus.header.label_config).unwrap();
    for (label, record) in labels.iter().zip(&corpus.records) {
        assert_eq!(label.target, record.target);
        assert_eq!(label.mu, record.mu);
    }
    let config = &corpus.header.label_config;
    let lo = corpus.records.iter().map(|r| r.psnr).fold(f64::INFINITY, f64::min);
    let hi = corpus.records.iter().map(|r| r.psnr).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((config.min_psnr, config.max_psnr), (lo, hi));
}

#[test]
fn crops_become_separate_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = write_pairs(tmp.path(), &[4]);
    let mut opts = options();
    opts.dip.max_iterations = 20;
    opts.crop = Some(CropSpec { size: 16, count: 3 });
    let corpus = build_corpus(&pairs, &opts, tmp.path().join("c")).unwrap().corpus;
    assert_eq!(corpus.header.sources, vec!["p4_c0", "p4_c1", "p4_c2"]);
    assert_eq!(corpus.records.len(), 3 * 2);
    let snap = Image::load(corpus.dir.join(&corpus.records[0].snapshot_path)).unwrap();
    assert_eq!((snap.height(), snap.width()), (16, 16));
}

#[test]
fn pairs_without_clean_images_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let mut pairs = write_pairs(tmp.path(), &[5]);
    pairs.records[0].clean_path = None;
    assert!(build_corpus(&pairs, &options(), tmp.path().join("c")).is_err());
}

#[test]
fn missing_clean_file_is_reported_per_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = write_pairs(tmp.path(), &[6, 7]);
    fs::remove_file(tmp.path().join("clean_7.png")).unwrap();
    let mut opts = options();
    opts.dip.max_iterations = 20;
    let build = build_corpus(&pairs, &opts, tmp.path().join("c")).unwrap();
    assert_eq!(build.failures.len(), 1);
    assert_eq!(build.failures[0].0, "p7");
    assert_eq!(build.corpus.header.sources, vec!["p6"]);
}

#[test]
fn manifest_round_trip_resolves_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let loaded = write_pairs(tmp.path(), &[8, 9]);
    assert_eq!(loaded.records.len(), 2);
    assert_eq!(loaded.records[0].noisy_path, tmp.path().join("noisy_8.png"));
    assert_eq!(loaded.records[1].clean_path.as_deref(), Some(tmp.path().join("clean_9.png").as_path()));
    assert_eq!(loaded.get("p9").unwrap().camera_tag.as_deref(), Some("synthetic"));

    let copy = tmp.path().join("copy.jsonl");
    save_manifest(&loaded, &copy).unwrap();
    assert_eq!(load_manifest(&copy).unwrap(), loaded);
}

#[test]
fn malformed_manifests_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    write_pairs(tmp.path(), &[10]);
    let path = tmp.path().join("bad.jsonl");
    let good = r#"{"id":"a","noisy_path":"noisy_10.png"}"#;
    fs::write(&path, format!("{good}\n{good}\n")).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains(":2:") && err.contains("duplicate"), "{err}");

    fs::write(&path, r#"{"id":"a","noisy_path":"missing.png"}"#).unwrap();
    assert!(load_manifest(&path).unwrap_err().to_string().contains(":1:"));
    fs::write(&path, r#"{"id":"../x","noisy_path":"noisy_10.png"}"#).unwrap();
    assert!(load_manifest(&path).is_err());
}
