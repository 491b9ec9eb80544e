//! The configuration files shipped in `configs/`.

use std::path::PathBuf;

use fundusbench::config::{ExperimentId, RunConfig};
use fundusbench::preprocess::Variant;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn exp2_config_spells_out_the_defaults() {
    let cfg = RunConfig::load(Some(&shipped("exp2.toml")), &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn exp1_config_selects_the_preprocessing_comparison() {
    let cfg = RunConfig::load(Some(&shipped("exp1.toml")), &[]).unwrap();
    assert_eq!(cfg.experiment.id, ExperimentId::Exp1Preprocessing);
    assert_eq!(cfg.experiment.variants, [Variant::Minimal, Variant::Enhanced]);
}

#[test]
fn smoke_config_is_small_and_random_init() {
    let cfg = RunConfig::load(Some(&shipped("smoke.toml")), &["training.phases[1].max_epochs=1".into()]).unwrap();
    assert!(!cfg.model.pretrained);
    assert_eq!(cfg.training.phases[1].max_epochs, 1);
    assert_eq!(cfg.preprocess.target_size, 48);
}

#[test]
fn resolved_config_round_trips() {
    let cfg = RunConfig::load(Some(&shipped("smoke.toml")), &["experiment.seeds=[1, 2]".into()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = cfg.write_resolved(dir.path()).unwrap();
    assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), cfg);
    assert_eq!(cfg.run_seeds(), [1, 2]);
}
