//! Stratified train/val/test split of a manifest.
//!
//! `cargo run -p fundusbench --example split_dataset`

use fundusbench::datasets::split::{split_sizes, stratified_split, SplitSpec};
use fundusbench::datasets::{DatasetId, DatasetManifest, FundusRecord, Label, Split};

fn main() -> fundusbench::Result<()> {
    // 396 normal and 309 glaucoma records, the class balance of a public set.
    let records = (0..705)
        .map(|i| FundusRecord {
            record_id: format!("ACRIMA/im{i:04}.png"),
            dataset_id: DatasetId::Acrima,
            image_path: format!("im{i:04}.png").into(),
            label: if i < 396 { Label::Normal } else { Label::Glaucoma },
            split: None,
        })
        .collect();
    let manifest = DatasetManifest::new(DatasetId::Acrima, records)?;
    let spec = SplitSpec::default();
    let split = stratified_split(&manifest, &spec)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        println!("{s:>5}: {:?}", split.split_counts(s));
    }
    println!("sizes for 396 normals: {:?}", split_sizes(396, &spec.fractions));
    let again = stratified_split(&manifest, &spec)?;
    println!("same seed, same assignment: {}", again == split);
    let other = stratified_split(&manifest, &SplitSpec { seed: 1, ..spec })?;
    let moved = split.records.iter().zip(&other.records).filter(|(a, b)| a.split != b.split).count();
    println!("seed 1 moves {moved} records");
    Ok(())
}
