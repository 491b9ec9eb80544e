//! The minimal and enhanced preprocessing pipelines on one synthetic image.
//!
//! `cargo run -p fundusbench --example preprocess_pipeline [OUT_DIR]`

use std::path::PathBuf;

use fundusbench::datasets::synthetic::{render, SyntheticStyle};
use fundusbench::datasets::Label;
use fundusbench::preprocess::{
    hist_equalize, run_pipeline, sample_augment, write_preview, ImageBuffer, PipelineConfig, RunMode,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fundusbench::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fundus_preview"));
    let raw = render(512, Label::Glaucoma, SyntheticStyle::Mottled, &mut ChaCha8Rng::seed_from_u64(3));
    let img = ImageBuffer::from_rgb8(&raw);

    for cfg in [PipelineConfig::default(), PipelineConfig::enhanced()] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eval = run_pipeline(&img, &cfg, RunMode::Eval, &mut rng)?;
        let again = run_pipeline(&img, &cfg, RunMode::Eval, &mut rng)?;
        let train = run_pipeline(&img, &cfg, RunMode::Train, &mut rng)?;
        println!(
            "{:?}: output {:?} {:?}, eval repeatable {}, train differs from eval by {:.4}",
            cfg.variant,
            eval.shape(),
            eval.range(),
            eval == again,
            train.mean_abs_diff(&eval)
        );
    }
    let eq = hist_equalize(&img)?;
    println!("equalized range {:?}, mean shift {:.2}", eq.range(), eq.mean_abs_diff(&img));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        println!("{:?}", sample_augment(&PipelineConfig::enhanced(), &mut rng));
    }

    let path = out.join("input.png");
    std::fs::create_dir_all(&out).map_err(|e| fundusbench::Error::io(&out, e))?;
    raw.save(&path).expect("write input");
    let written = write_preview(&[path], &PipelineConfig::enhanced(), &out)?;
    println!("preview: {:?}", written);
    Ok(())
}
