//! Early stopping and best-weight restore, driven by a scripted runner.
//!
//! `cargo run -p fundusbench --example early_stopping`

use fundusbench::datasets::DatasetId;
use fundusbench::training::{
    fit_phase, EarlyStopPolicy, EpochRunner, EpochStats, EvalOutcome, Monitor, PhaseConfig, PlateauPolicy,
    TrainingHistory,
};

/// Validation AUCs come from a script; the "weights" are the epoch number.
struct Script {
    aucs: Vec<f64>,
    epoch: usize,
    saved: usize,
}

impl EpochRunner for Script {
    fn train_epoch(&mut self, epoch: usize, _lr: f64) -> fundusbench::Result<EpochStats> {
        self.epoch = epoch;
        Ok(EpochStats { train_loss: 1.0 / epoch as f64, non_finite_batch: None })
    }
    fn evaluate(&mut self) -> fundusbench::Result<EvalOutcome> {
        let auc = self.aucs[self.epoch - 1];
        Ok(EvalOutcome { loss: 1.0 - auc, auc: Some(auc), record_ids: vec![], labels: vec![], scores: vec![] })
    }
    fn snapshot(&mut self) {
        self.saved = self.epoch;
    }
    fn restore(&mut self) {
        self.epoch = self.saved;
    }
}

fn main() -> fundusbench::Result<()> {
    let aucs = vec![0.60, 0.70, 0.7004, 0.7006, 0.71, 0.72, 0.72, 0.72];
    let phase = PhaseConfig { dataset: DatasetId::Acrima, base_lr: 1e-3, backbone_lr_scale: 1.0, max_epochs: 8, batch_size: 32 };
    for (patience, min_delta) in [(2, 0.001), (5, 0.001), (1, 0.01)] {
        let mut r = Script { aucs: aucs.clone(), epoch: 0, saved: 0 };
        let policy = EarlyStopPolicy { patience, min_delta, restore_best: true };
        let h = fit_phase(&mut r, 1, &phase, &policy, &PlateauPolicy::default(), Monitor::ValAuc, &TrainingHistory::default())?;
        println!(
            "patience {patience}, min_delta {min_delta}: ran {} epochs ({:?}), best epoch {:?}, weights now from epoch {}",
            h.epochs.len(),
            h.stop_reason,
            h.best_epoch,
            r.epoch
        );
    }
    Ok(())
}
