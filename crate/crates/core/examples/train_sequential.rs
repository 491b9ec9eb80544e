//! Two-phase training (ACRIMA, then ORIGA) on small synthetic stand-ins,
//! with RIMONE held out and scored at the end.
//!
//! `cargo run -p fundusbench --example train_sequential`
//!
//! Images are 48 px so the run takes well under a minute on one core.

use std::collections::BTreeMap;

use fundusbench::datasets::split::{stratified_split, SplitSpec};
use fundusbench::datasets::synthetic::{generate_synthetic, SyntheticSpec};
use fundusbench::datasets::{DatasetId, Split};
use fundusbench::metrics::evaluate_scores;
use fundusbench::model::{build_model, ModelConfig};
use fundusbench::preprocess::PipelineConfig;
use fundusbench::training::{evaluate_epoch, run_sequential, AuditLog, TrainingConfig};

fn main() -> fundusbench::Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let tmp = tempfile::tempdir().map_err(|e| fundusbench::Error::io(".", e))?;
    let mut manifests = BTreeMap::new();
    for id in [DatasetId::Acrima, DatasetId::Origa, DatasetId::RimOne] {
        let m = generate_synthetic(&tmp.path().join(id.as_str()), &SyntheticSpec::stand_in(id, 20, 64, 3))?;
        manifests.insert(id, stratified_split(&m, &SplitSpec::default())?);
    }
    let mut training = TrainingConfig::default();
    for p in &mut training.phases {
        p.max_epochs = 4;
        p.batch_size = 8;
    }
    let pipeline = PipelineConfig { target_size: 48, ..PipelineConfig::default() };
    let mut model = build_model(&ModelConfig { pretrained: false, ..ModelConfig::default() }, 1)?;
    let mut audit = AuditLog::in_memory();
    let history = run_sequential(&mut model, &manifests, &training, &pipeline, 1, Some(tmp.path()), false, &mut audit)?;
    print!("{}", history.to_csv());
    println!(
        "audit: {} training batches, {} containing RIMONE",
        audit.lines().len(),
        audit.count_dataset(DatasetId::RimOne)
    );
    for id in [DatasetId::Acrima, DatasetId::Origa, DatasetId::RimOne] {
        let out = evaluate_epoch(&mut model, &manifests[&id], Split::Test, &pipeline, 16)?;
        let e = evaluate_scores(id.as_str(), &out.scores, &out.labels, 0.5)?;
        println!("{id} test: accuracy {:.3}, AUC {:?}", e.accuracy.unwrap_or(f64::NAN), e.auc);
    }

    // A plan that trains on the held-out dataset is refused before any work.
    let mut bad = training.clone();
    bad.phases[1].dataset = DatasetId::RimOne;
    let err = run_sequential(&mut model, &manifests, &bad, &pipeline, 1, None, false, &mut audit).unwrap_err();
    println!("held-out plan rejected: {err}");
    Ok(())
}
