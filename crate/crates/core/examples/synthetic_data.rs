//! Generates the synthetic stand-ins and shows their class separation.
//!
//! `cargo run -p fundusbench --example synthetic_data [OUT_DIR]`

use std::path::PathBuf;

use fundusbench::datasets::synthetic::{generate_synthetic, pale_pixel_count, SyntheticSpec};
use fundusbench::datasets::{DatasetId, Label};

fn main() -> fundusbench::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fundus_synthetic"));
    for id in [DatasetId::Acrima, DatasetId::Origa, DatasetId::RimOne] {
        let spec = SyntheticSpec::stand_in(id, 20, 128, 11);
        let m = generate_synthetic(&out.join(id.as_str()), &spec)?;
        let pale = |label: Label| {
            let v: Vec<usize> = m
                .records
                .iter()
                .filter(|r| r.label == label)
                .map(|r| pale_pixel_count(&image::open(&r.image_path).expect("decodes").to_rgb8()))
                .collect();
            (v.iter().min().copied().unwrap_or(0), v.iter().max().copied().unwrap_or(0))
        };
        println!(
            "{id} ({:?}): {} images, pale-area range normal {:?}, glaucoma {:?}",
            spec.style,
            m.len(),
            pale(Label::Normal),
            pale(Label::Glaucoma)
        );
    }
    println!("written under {}", out.display());
    Ok(())
}
