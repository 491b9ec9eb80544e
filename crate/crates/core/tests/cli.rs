//! Drives the `fundusbench` binary on tiny synthetic runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[data.synthetic]
n_per_class = 6
image_size = 40
[preprocess]
target_size = 32
[model]
pretrained = false
[[training.phases]]
dataset = "ACRIMA"
base_lr = 0.001
backbone_lr_scale = 1.0
max_epochs = 2
batch_size = 4
[[training.phases]]
dataset = "ORIGA"
base_lr = 0.0001
backbone_lr_scale = 0.1
max_epochs = 2
batch_size = 4
"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fundusbench"))
        .current_dir(dir)
        .args(["--log", "error"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn artifacts(out: &Output) -> PathBuf {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().find_map(|l| l.strip_prefix("artifacts: ")).expect("artifacts line");
    PathBuf::from(line)
}

#[test]
fn ingest_synthetic_writes_manifest() {
    let (dir, _) = setup();
    let out = bin(dir.path(), &["ingest", "--synthetic", "5", "--out", "synth", "--image-size", "32"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("synth/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 11);
    assert!(manifest.starts_with("record_id,dataset_id,image_path,label,split\n"));

    let out = bin(dir.path(), &["ingest", "--root", "synth", "--dataset", "ORIGA", "--adapter", "sidecar_csv", "--out", "o.csv"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("ORIGA: 10 records (5 normal, 5 glaucoma)"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(bin(dir.path(), &["ingest", "--dataset", "ACRIMA", "--adapter", "x", "--out", "m.csv"]).status.code(), Some(2));
    let out = bin(dir.path(), &["experiment", "--config", cfg, "--set", "training.early_stopping.patience_=1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("valid keys") && err.contains("training.early_stopping.patience"), "{err}");
    assert_eq!(bin(dir.path(), &["experiment", "--config", cfg, "--set", "training.phases[1].dataset=RIMONE"]).status.code(), Some(2));
    assert_eq!(bin(dir.path(), &["ingest", "--root", ".", "--dataset", "ORIGA", "--adapter", "acrima_filename", "--out", "m.csv"]).status.code(), Some(2));
    assert_eq!(bin(dir.path(), &["plot", "--from", "missing.json"]).status.code(), Some(1));
}

#[test]
fn experiment_is_deterministic_and_figures_regenerate() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    let a = bin(dir.path(), &["experiment", "--config", cfg, "--seed", "42"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = bin(dir.path(), &["experiment", "--config", cfg, "--seed", "42"]);
    let (a, b) = (dir.path().join(artifacts(&a)), dir.path().join(artifacts(&b)));
    assert_ne!(a, b);
    let tables = std::fs::read_to_string(a.join("tables.csv")).unwrap();
    assert_eq!(tables.lines().count(), 4);
    assert!(tables.lines().skip(1).all(|l| l.contains(",synthetic,")), "{tables}");
    assert_eq!(std::fs::read(a.join("tables.csv")).unwrap(), std::fs::read(b.join("tables.csv")).unwrap());
    for f in ["report.json", "config_resolved.toml", "audit.log", "scores/seed42_sequential_RIMONE.csv", "manifests/RIMONE.csv"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }

    let replot = dir.path().join("replot");
    let out = bin(dir.path(), &["plot", "--from", a.join("report.json").to_str().unwrap(), "--out", replot.to_str().unwrap()]);
    assert!(out.status.success());
    let mut n = 0;
    for entry in std::fs::read_dir(a.join("figures")).unwrap() {
        let p = entry.unwrap().path();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(replot.join(p.file_name().unwrap())).unwrap());
        n += 1;
    }
    assert_eq!(n, 8, "roc, metrics and two loss figures, each as svg and png");

    // The resolved config replays the run.
    let c = bin(dir.path(), &["experiment", "--config", a.join("config_resolved.toml").to_str().unwrap()]);
    let c = dir.path().join(artifacts(&c));
    assert_eq!(std::fs::read(a.join("tables.csv")).unwrap(), std::fs::read(c.join("tables.csv")).unwrap());
}

#[test]
fn train_override_resume_and_evaluate() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    let out = bin(dir.path(), &["train", "--config", cfg, "--set", "training.phases[0].max_epochs=1", "--run-dir", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    let phase1 = history.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("1")).count();
    assert_eq!(phase1, 1);
    for f in ["phase1_best.ckpt", "phase2_best.ckpt", "final.ckpt", "config_resolved.toml", "audit.log"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    // Both phases are complete, so a resume trains nothing new.
    let before = std::fs::read_to_string(run.join("audit.log")).unwrap();
    let out = bin(dir.path(), &["train", "--config", cfg, "--set", "training.phases[0].max_epochs=1", "--run-dir", "run", "--resume"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(run.join("audit.log")).unwrap(), before);
    assert_eq!(std::fs::read_to_string(run.join("history.csv")).unwrap(), history);

    let ckpt = run.join("final.ckpt");
    let out = bin(dir.path(), &["evaluate", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", "ev"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("RIMONE: n="));
    assert!(dir.path().join("ev/scores/RIMONE.csv").is_file());

    let out = bin(dir.path(), &["evaluate", "--config", cfg, "--set", "model.head_hidden=16", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("head_hidden"));
}

#[test]
fn preprocess_preview_writes_pairs() {
    let (dir, _) = setup();
    assert!(bin(dir.path(), &["ingest", "--synthetic", "1", "--out", "s", "--image-size", "64"]).status.success());
    let out = bin(dir.path(), &["preprocess", "preview", "--variant", "enhanced", "--out", "pv", "s/syn_00000_c0.png", "s/syn_00000_c1.png"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for stem in ["syn_00000_c0", "syn_00000_c1"] {
        for side in ["before", "after"] {
            let img = image::open(dir.path().join(format!("pv/{stem}_{side}.png"))).unwrap();
            let expect = if side == "before" { 64 } else { 224 };
            assert_eq!(img.width(), expect);
        }
    }
}
