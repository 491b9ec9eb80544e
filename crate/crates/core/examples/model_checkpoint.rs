//! Builds the classifier, scores a probe batch, and round-trips a checkpoint.
//!
//! `cargo run -p fundusbench --example model_checkpoint`

use fundus_nn::{Module, Tensor};
use fundusbench::model::{build_model, Classifier, ModelConfig};

fn main() -> fundusbench::Result<()> {
    let cfg = ModelConfig { pretrained: false, ..ModelConfig::default() };
    let mut model = build_model(&cfg, 7)?;
    println!(
        "trainable parameters: backbone {}, head {}",
        model.backbone.trainable_count(),
        model.head.param_count()
    );
    let probe = Tensor::from_vec([2, 3, 64, 64], (0..2 * 3 * 64 * 64).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect());
    let p = model.predict_proba(probe.clone());
    println!("probe probabilities {p:?}");

    let dir = tempfile::tempdir().map_err(|e| fundusbench::Error::io(".", e))?;
    let path = dir.path().join("model.ckpt");
    model.save_checkpoint(&path, &[("note", "example".to_string())])?;
    let mut restored = Classifier::load_checkpoint(&path, Some(&cfg))?;
    println!("restored outputs identical: {}", restored.predict_proba(probe) == p);
    println!("metadata keys: {:?}", {
        let mut k: Vec<_> = Classifier::checkpoint_metadata(&path)?.into_keys().collect();
        k.sort();
        k
    });

    let wider = ModelConfig { head_hidden: 256, ..cfg };
    match Classifier::load_checkpoint(&path, Some(&wider)) {
        Err(e) => println!("mismatched load rejected (exit code {}):\n{e}", e.exit_code()),
        Ok(_) => unreachable!("head widths differ"),
    }
    Ok(())
}
