//! End-to-end behavior of the `advdev` binary on the synthetic config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use advdev::deviation::{compute_deviations, extract_representations, normalization_constants};
use advdev::io::config::RunConfig;
use advdev::io::data::{load_dataset, load_mask};
use advdev::io::persist::load_model;
use advdev::io::report::parse_deviations_csv;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn synthetic_config() -> PathBuf {
    workspace_root().join("configs/synthetic.toml")
}

fn advdev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advdev")).args(args).output().unwrap()
}

/// One pipeline run shared by the tests that only read its outputs.
fn shared_run() -> &'static Path {
    static RUN: OnceLock<tempfile::TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = advdev(&[
            "pipeline",
            "--config",
            synthetic_config().to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = shared_run();
    for f in [
        "model.advd",
        "train.json",
        "clean.advs",
        "clean_ids.json",
        "attacks.json",
        "attacks/fgsm.advs",
        "attacks/fgsm.mask.json",
        "attacks/bim.advs",
        "attacks/cw.advs",
        "attacks/cw.mask.json",
        "results/deviations.csv",
        "results/summary.json",
        "results/normalization.json",
        "plots/violin_fgsm_euclidean.svg",
        "plots/violin_cw_cosine.svg",
        "images/samples.ppm",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let leftovers: Vec<_> = walk(dir).into_iter().filter(|p| p.extension().is_some_and(|e| e == "tmp")).collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
    for svg in fs::read_dir(dir.join("plots")).unwrap() {
        let text = fs::read_to_string(svg.unwrap().path()).unwrap();
        roxmltree::Document::parse(&text).unwrap();
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn csv_matches_in_memory_results() {
    let dir = shared_run();
    let cfg = RunConfig::load(&synthetic_config()).unwrap();
    let model = load_model(&dir.join("model.advd")).unwrap();
    let clean = load_dataset(&dir.join("clean.advs")).unwrap();
    let ids: Vec<usize> = serde_json::from_slice(&fs::read(dir.join("clean_ids.json")).unwrap()).unwrap();
    let reps = extract_representations(&model, &clean.images, &ids, None).unwrap();
    let consts: Vec<_> = cfg
        .analysis
        .metrics
        .iter()
        .map(|&m| normalization_constants(&reps, m, None, cfg.seed).unwrap())
        .collect();
    let mut expected = Vec::new();
    for spec in &cfg.attacks {
        let adv = load_dataset(&dir.join(format!("attacks/{}.advs", spec.id()))).unwrap();
        let mask = load_mask(&dir.join(format!("attacks/{}.mask.json", spec.id()))).unwrap();
        let adv_reps = extract_representations(&model, &adv.images, &ids, None).unwrap();
        let t = compute_deviations(&reps, &adv_reps, &consts, Some(&mask.success), spec.id()).unwrap();
        let successes = mask.success.iter().filter(|&&s| s).count();
        assert_eq!(t.rows.len(), successes * reps.checkpoints.len() * consts.len());
        expected.extend(t.rows.into_iter().map(|r| (spec.id().to_string(), r)));
    }
    let parsed = parse_deviations_csv(&fs::read_to_string(dir.join("results/deviations.csv")).unwrap()).unwrap();
    assert_eq!(parsed.len(), expected.len());
    let rel = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) };
    for (p, (attack, r)) in parsed.iter().zip(&expected) {
        assert_eq!(&p.attack, attack);
        assert_eq!((p.row.image_id, p.row.checkpoint, p.row.metric), (r.image_id, r.checkpoint, r.metric));
        assert!(rel(p.row.raw, r.raw) <= 1e-15);
        assert!(rel(p.row.normalized, r.normalized) <= 1e-15);
    }
}

#[test]
fn filtered_rows_are_adversarial() {
    let dir = shared_run();
    let model = load_model(&dir.join("model.advd")).unwrap();
    let clean = load_dataset(&dir.join("clean.advs")).unwrap();
    let ids: Vec<usize> = serde_json::from_slice(&fs::read(dir.join("clean_ids.json")).unwrap()).unwrap();
    let rows = parse_deviations_csv(&fs::read_to_string(dir.join("results/deviations.csv")).unwrap()).unwrap();
    for attack in ["fgsm", "bim", "cw"] {
        let adv = load_dataset(&dir.join(format!("attacks/{attack}.advs"))).unwrap();
        for r in rows.iter().filter(|r| r.attack == attack) {
            let k = ids.iter().position(|&i| i == r.row.image_id).unwrap();
            assert_ne!(model.predict(&adv.images[k]).unwrap(), clean.labels[k]);
        }
    }
}

#[test]
fn later_stages_are_reproducible() {
    let src = shared_run();
    let dir = tempfile::tempdir().unwrap();
    // copy the run, drop analysis outputs, regenerate them
    for p in walk(src) {
        let rel = p.strip_prefix(src).unwrap();
        let dst = dir.path().join(rel);
        fs::create_dir_all(dst.parent().unwrap()).unwrap();
        fs::copy(&p, &dst).unwrap();
    }
    fs::remove_dir_all(dir.path().join("results")).unwrap();
    fs::remove_dir_all(dir.path().join("plots")).unwrap();
    let cfg = synthetic_config();
    for stage in ["analyze", "plot"] {
        let out = advdev(&[stage, "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for p in walk(&src.join("results")).into_iter().chain(walk(&src.join("plots"))) {
        let rel = p.strip_prefix(src).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join(rel)).unwrap(), "{}", rel.display());
    }
}

#[test]
fn exit_codes() {
    let cfg = synthetic_config();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(advdev(&["--help"]).status.code(), Some(0));
    assert_eq!(advdev(&["--version"]).status.code(), Some(0));
    assert_eq!(advdev(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(advdev(&["train", "--config", cfg, "--bogus"]).status.code(), Some(1));
    assert_eq!(advdev(&["train", "--config", "/nonexistent/config.toml"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "version = 1\nunknown = true\n").unwrap();
    assert_eq!(advdev(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(1));

    let out = advdev(&["analyze", "--config", cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("run `train` first"), "{stderr}");

    let out = advdev(&["plot", "--config", cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `analyze` first"));
}

#[test]
fn seed_flag_overrides_config() {
    let a = tempfile::tempdir().unwrap();
    let cfg = synthetic_config();
    let run = |seed: &str, dir: &Path| {
        let out = advdev(&["train", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(dir.join("model.advd")).unwrap()
    };
    let b = tempfile::tempdir().unwrap();
    assert_ne!(run("1", a.path()), run("2", b.path()));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(b.path().join("train.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 2);
}
