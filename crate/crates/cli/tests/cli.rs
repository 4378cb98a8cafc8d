//! End-to-end checks of the command-line binary: exit codes, cache reuse,
//! override precedence, and checkpoint-tamper detection.

use std::path::Path;
use std::process::{Command, Output};

use intapt_core::config::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_intapt"))
}

/// Small enough to finish a full pipeline in seconds; quality is irrelevant
/// to what these tests assert.
fn micro_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![7];
    cfg.batch_size = 8;
    cfg.epochs_pretrain = 60;
    cfg.epochs_am = 2;
    cfg.epochs_regime = 1;
    cfg.prompt_len = 3;
    cfg.d_acc = 16;
    cfg.mine_hidden = 16;
    cfg.prompt_d_ff = 16;
    cfg.param_ratio_cap = 1.0;
    cfg.backbone.n_layers = 2;
    cfg.backbone.d_model = 24;
    cfg.backbone.n_heads = 2;
    cfg.backbone.d_ff = 48;
    cfg.backbone.d_feat = 8;
    cfg.backbone.max_len = 32;
    cfg.backbone.tap_layer = 0;
    cfg.corpus.d_feat = 8;
    cfg.corpus.n_transcripts = 40;
    cfg.corpus.transcript_len_min = 2;
    cfg.corpus.transcript_len_max = 4;
    cfg.corpus.frames_per_token = 4;
    cfg.corpus.n_mfa = 1;
    cfg.corpus.n_lfa = 1;
    cfg.corpus.n_ua = 1;
    cfg.corpus.speakers_per_accent = 2;
    cfg
}

fn write_cfg(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("INTAPT_OUTPUT_ROOT").output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

#[test]
fn gen_data_builds_then_reuses_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(tmp.path(), &micro_cfg());
    let root = tmp.path().join("runs");
    let root_s = root.to_string_lossy().into_owned();

    let first = run(&["gen-data", "--config", &cfg_path, "--output-root", &root_s]);
    assert_eq!(code(&first), 0, "stderr: {}", stderr(&first));
    assert!(stdout(&first).contains("built corpus"), "got: {}", stdout(&first));

    let cache: Vec<_> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("corpus-"))
        .collect();
    assert_eq!(cache.len(), 1);
    let bytes_first = std::fs::read(&cache[0]).unwrap();

    let second = run(&["gen-data", "--config", &cfg_path, "--output-root", &root_s]);
    assert_eq!(code(&second), 0);
    assert!(stdout(&second).contains("reused corpus"), "got: {}", stdout(&second));
    assert_eq!(bytes_first, std::fs::read(&cache[0]).unwrap(), "cache must be byte-stable");
}

#[test]
fn invalid_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(tmp.path(), &micro_cfg());
    let root = tmp.path().join("runs").to_string_lossy().into_owned();
    let out =
        run(&["gen-data", "--config", &cfg_path, "--output-root", &root, "--batch-size", "1"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("batch size"), "got: {}", stderr(&out));
}

#[test]
fn unknown_flag_exits_one() {
    let out = run(&["gen-data", "--no-such-flag"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("gen-data"));
}

#[test]
fn train_without_pretrain_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(tmp.path(), &micro_cfg());
    let root = tmp.path().join("runs").to_string_lossy().into_owned();
    let out = run(&[
        "train",
        "--regime",
        "finetune",
        "--config",
        &cfg_path,
        "--output-root",
        &root,
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("backbone checkpoint missing"), "got: {}", stderr(&out));
}

#[test]
fn unknown_regime_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(tmp.path(), &micro_cfg());
    let root = tmp.path().join("runs").to_string_lossy().into_owned();
    let out = run(&[
        "train",
        "--regime",
        "distill",
        "--config",
        &cfg_path,
        "--output-root",
        &root,
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown regime"), "got: {}", stderr(&out));
}

#[test]
fn tampered_backbone_checkpoint_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(tmp.path(), &micro_cfg());
    let root = tmp.path().join("runs");
    let root_s = root.to_string_lossy().into_owned();

    let pre = run(&["pretrain", "--config", &cfg_path, "--output-root", &root_s]);
    assert_eq!(code(&pre), 0, "stderr: {}", stderr(&pre));

    let bb_path = root.join("seed-7").join("backbone.json");
    let mut text = std::fs::read_to_string(&bb_path).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let fp = doc["fingerprint"].as_str().unwrap().to_string();
    doc["fingerprint"] = serde_json::Value::String(format!("deadbeef{}", &fp[8..]));
    text = serde_json::to_string(&doc).unwrap();
    std::fs::write(&bb_path, text).unwrap();

    let out = run(&["train-am", "--config", &cfg_path, "--output-root", &root_s]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("fingerprint mismatch"), "got: {}", stderr(&out));
}

#[test]
fn run_all_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(tmp.path(), &micro_cfg());
    let root = tmp.path().join("runs");
    let root_s = root.to_string_lossy().into_owned();

    let out = run(&["run-all", "--config", &cfg_path, "--output-root", &root_s]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([7]));
    assert!(root.join("report.txt").exists());
    assert!(root.join("seed-7").join("eval.json").exists());

    let text = stdout(&out);
    assert!(text.contains("finetune") && text.contains("intapt"), "got: {text}");
}

#[test]
fn output_root_env_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(tmp.path(), &micro_cfg());
    let root = tmp.path().join("envroot");

    let out = bin()
        .args(["gen-data", "--config", &cfg_path])
        .env("INTAPT_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(root.exists(), "corpus cache should land under the env root");
}

#[test]
fn flag_overrides_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(tmp.path(), &micro_cfg());
    let root = tmp.path().join("runs").to_string_lossy().into_owned();

    let from_file = run(&["gen-data", "--config", &cfg_path, "--output-root", &root]);
    let overridden = run(&[
        "gen-data",
        "--config",
        &cfg_path,
        "--output-root",
        &root,
        "--corpus-n-transcripts",
        "30",
    ]);
    assert_eq!(code(&from_file), 0);
    assert_eq!(code(&overridden), 0);
    assert!(stdout(&overridden).contains("built corpus"), "override must change the cache key");
    assert_ne!(
        stdout(&from_file),
        stdout(&overridden),
        "utterance counts should differ when the transcript pool shrinks"
    );
}
