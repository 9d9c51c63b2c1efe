use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

const TINY: &str = "\
depth = 3
filters = 8
filters_skip = 2
input_channels = 8
max_iterations = 40
eval_every = 5
smoothing_window = 2
patience = 2
search_radius = 1
min_evals = 3
label_samples = 2000
width_multiplier = 0.25
input_resize = 32
train_crop = 32
stage1_epochs = 1
stage2_epochs = 1
batch_size = 4
";

fn dipstop(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dipstop"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run dipstop");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let (code, text) = dipstop(args, cwd);
    assert_eq!(code, 0, "dipstop {}: {text}", args.join(" "));
    text
}

/// Synthetic pairs, a corpus and a model, all at toy scale.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    ok(&["synth", "--out", "pairs", "--count", "3", "--size", "32"], dir);
    ok(&["make-corpus", "--config", "tiny.cfg", "--pairs", "pairs/pairs.jsonl", "--out", "corpus"], dir);
    ok(&["train", "--config", "tiny.cfg", "--corpus", "corpus", "--out", "model.bin"], dir);
    tmp
}

/// A denoise run either declares a peak (0) or falls back (3); both produce outputs.
fn denoised(args: &[&str], cwd: &Path) {
    let (code, text) = dipstop(args, cwd);
    assert!(code == 0 || code == 3, "dipstop {}: {text}", args.join(" "));
}

fn trace(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("trace.json")).unwrap()).unwrap()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = dipstop(&["evaluate", "--pairs", "p.jsonl", "--out", "o"], tmp.path());
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("--model"), "{text}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.cfg"), "depth = 3\npatiance = 4\n").unwrap();
    let (code, text) = dipstop(&["pretrain-backbone", "--config", "bad.cfg", "--out", "b.bin"], tmp.path());
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("bad.cfg:2"), "{text}");
}

#[test]
fn pipeline_end_to_end() {
    let tmp = workspace();
    let dir = tmp.path();

    let corpus = fs::read_to_string(dir.join("corpus/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 1 + 3 * 40 / 5);
    assert!(dir.join("model.bin").is_file());

    // evaluate: one run directory per pair and a report with an average row.
    ok(&["evaluate", "--config", "tiny.cfg", "--pairs", "pairs/pairs.jsonl", "--model", "model.bin", "--out", "eval"], dir);
    let report = fs::read_to_string(dir.join("eval/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "camera,image,psnr_db,best_psnr_db,chosen_iteration,no_peak_declared");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("average,"));
    for id in ["syn000", "syn001", "syn002"] {
        assert!(dir.join("eval/runs").join(id).join("trace.json").is_file(), "{id}");
    }

    // Flag beats file beats default, and the resolved values are echoed.
    fs::write(dir.join("more.cfg"), format!("{TINY}seed = 5\npatience = 4\n")).unwrap();
    denoised(
        &["denoise", "pairs/noisy_000.png", "--config", "more.cfg", "--model", "model.bin", "--patience", "3", "--out", "a", "--score-curve"],
        dir,
    );
    let t = trace(&dir.join("a"));
    assert_eq!(t["config"]["stop"]["patience"], 3);
    assert_eq!(t["config"]["seed"], 5);
    assert_eq!(t["config"]["dip"]["seed"], 5);
    assert_eq!(t["config"]["stop"]["search_radius"], 1);
    assert_eq!(t["config"]["stop"]["smoothing_window"], 2);
    let chosen = t["outcome"]["chosen_iteration"].as_u64().unwrap();
    assert!(dir.join("a/denoised.png").is_file());
    assert!(dir.join("a/snapshots").join(format!("snap_{chosen:06}.png")).is_file());
    let curve = fs::read_to_string(dir.join("a/score_curve.csv")).unwrap();
    assert!(curve.starts_with("iteration,raw_score,smoothed_score,loss,psnr"));

    // Same inputs, same bytes.
    denoised(&["denoise", "pairs/noisy_000.png", "--config", "more.cfg", "--model", "model.bin", "--patience", "3", "--out", "b", "--score-curve"], dir);
    assert_eq!(fs::read(dir.join("a/trace.json")).unwrap(), fs::read(dir.join("b/trace.json")).unwrap());

    // Too short to declare a peak: the fallback pick is made and flagged.
    let (code, text) = dipstop(
        &["denoise", "pairs/noisy_001.png", "--config", "tiny.cfg", "--model", "model.bin", "--max-iters", "1", "--eval-every", "1", "--out", "c"],
        dir,
    );
    assert_eq!(code, 3, "{text}");
    let t = trace(&dir.join("c"));
    assert_eq!(t["trace"]["no_peak_declared"], true);
    assert!(dir.join("c/denoised.png").is_file());

    // Warm start from a saved state, with the reference echoed per entry.
    denoised(&["denoise", "pairs/noisy_001.png", "--config", "tiny.cfg", "--model", "model.bin", "--save-state", "state.bin", "--out", "d"], dir);
    denoised(
        &["denoise", "pairs/noisy_002.png", "--config", "tiny.cfg", "--model", "model.bin", "--warm-start", "state.bin", "--reference", "pairs/clean_002.png", "--out", "e"],
        dir,
    );
    let t = trace(&dir.join("e"));
    assert!(t["trace"]["entries"][0]["psnr"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.cfg"), TINY).unwrap();
    let (code, text) = dipstop(&["denoise", "nope.png", "--config", "tiny.cfg", "--model", "nope.bin", "--out", "o"], tmp.path());
    assert_eq!(code, 1, "{text}");
}
