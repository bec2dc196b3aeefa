//! Drives the `latmo` binary end to end on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = "\
vae.hidden_dim = 16
vae.layers = 1
vae_train.epochs = 1
denoiser.hidden_dim = 16
denoiser.layers = 1
diffusion_train.epochs = 1
projector.hidden_dim = 16
projector.layers = 1
projector_train.epochs = 1
extractor.hidden_dim = 16
extractor.layers = 1
extractor_train.epochs = 1
schedule.inference_steps = 5
";

fn latmo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latmo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn latmo")
}

fn ok(args: &[&str]) -> String {
    let out = latmo(args);
    assert!(
        out.status.success(),
        "latmo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: PathBuf,
    ckpt: PathBuf,
}

/// A checkpoint with every stage trained, shared by the tests below.
fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let cfg = dir.join("tiny.conf");
        std::fs::write(&cfg, TINY).unwrap();
        let ckpt = dir.join("stack.ckpt");
        for stage in ["vae", "diffusion", "projector", "extractor"] {
            ok(&["train", "--stage", stage, "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
        }
        Fixture { dir, ckpt }
    })
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn training_out_of_order_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.conf");
    std::fs::write(&cfg, TINY).unwrap();
    let out = latmo(&[
        "train",
        "--stage",
        "projector",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&dir.path().join("x.ckpt")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("vae"), "{err}");
    assert!(!dir.path().join("x.ckpt").exists());
}

#[test]
fn training_writes_a_log_per_stage() {
    let f = fixture();
    for stage in ["vae", "diffusion", "projector", "extractor"] {
        let log = f.ckpt.with_extension(format!("{stage}.log.csv"));
        assert!(!csv_rows(&log).is_empty(), "{}", log.display());
    }
}

#[test]
fn generate_writes_one_row_per_requested_frame() {
    let f = fixture();
    let out = f.dir.join("gen");
    ok(&[
        "generate",
        "--checkpoint",
        s(&f.ckpt),
        "--caption",
        "a person walks forward",
        "--length",
        "47",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(csv_rows(&out.join("features.csv")).len(), 47);
    assert!(out.join("joints.csv").exists());
    assert!(std::fs::read_to_string(out.join("motion.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn generate_rejects_out_of_range_lengths() {
    let f = fixture();
    let out = latmo(&["generate", "--checkpoint", s(&f.ckpt), "--caption", "a person runs", "--length", "5"]);
    assert!(!out.status.success());
}

#[test]
fn learned_token_feeds_back_into_generation() {
    let f = fixture();
    let token = f.dir.join("bouncy.json");
    let stdout = ok(&[
        "invert",
        "--checkpoint",
        s(&f.ckpt),
        "--style",
        "bouncy",
        "--steps",
        "2",
        "--batch",
        "2",
        "--out",
        s(&token),
    ]);
    assert!(stdout.contains("probe loss"));
    let out = f.dir.join("gen_token");
    ok(&[
        "generate",
        "--checkpoint",
        s(&f.ckpt),
        "--caption",
        "a person <*>",
        "--token",
        s(&token),
        "--length",
        "39",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(csv_rows(&out.join("features.csv")).len(), 39);
}

#[test]
fn evaluate_reports_both_variants_and_ground_truth() {
    let f = fixture();
    let out = f.dir.join("report.csv");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&f.ckpt),
        "--repeats",
        "1",
        "--mm-captions",
        "2",
        "--out",
        s(&out),
    ]);
    let labels: Vec<String> = csv_rows(&out).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(labels.len(), 3, "{labels:?}");
    assert!(labels.iter().any(|l| l == "realign"));
    assert!(labels.iter().any(|l| l == "no_realign"));
}

#[test]
fn ablate_lists_the_full_model_and_each_removed_term() {
    let f = fixture();
    let out = f.dir.join("ablation.csv");
    ok(&["ablate", "--checkpoint", s(&f.ckpt), "--repeats", "1", "--out", s(&out)]);
    let labels: Vec<String> = csv_rows(&out).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(labels, ["full", "noALIGN", "noREC", "noKL"]);
}

#[test]
fn export_writes_one_row_per_test_item() {
    let f = fixture();
    let out = f.dir.join("latents.csv");
    ok(&["export-features", "--checkpoint", s(&f.ckpt), "--space", "vae", "--out", s(&out)]);
    assert!(csv_rows(&out).len() >= 64);
}

#[test]
fn defaults_round_trip_through_train() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["defaults"]);
    assert!(text.contains("guidance = 7.5"));
    let cfg = dir.path().join("defaults.conf");
    std::fs::write(&cfg, format!("{text}\n{TINY}")).unwrap();
    ok(&[
        "train",
        "--stage",
        "vae",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&dir.path().join("d.ckpt")),
    ]);
}
