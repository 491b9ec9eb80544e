//! Builds manifests from a dataset directory through each label adapter.
//!
//! `cargo run -p fundusbench --example ingest_dataset [ROOT DATASET ADAPTER]`
//!
//! Without arguments a small synthetic dataset is generated and laid out
//! three ways (ACRIMA-style file names, a label sheet, class folders).

use std::path::Path;

use fundusbench::datasets::synthetic::{generate_synthetic, SyntheticSpec};
use fundusbench::datasets::{ingest, DatasetId, Label};

fn main() -> fundusbench::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [root, dataset, adapter] = args.as_slice() {
        let out = ingest(Path::new(root), dataset.parse()?, adapter)?;
        report(&out.manifest);
        return Ok(());
    }

    let tmp = tempfile::tempdir().map_err(|e| fundusbench::Error::io(".", e))?;
    let sheet_dir = tmp.path().join("sheet");
    let generated = generate_synthetic(&sheet_dir, &SyntheticSpec::stand_in(DatasetId::Origa, 6, 64, 1))?;
    let by_sheet = ingest(&sheet_dir, DatasetId::Origa, "sidecar_csv")?;
    assert_eq!(by_sheet.manifest.records.len(), generated.records.len());
    report(&by_sheet.manifest);

    let named = tmp.path().join("acrima");
    let dirs = tmp.path().join("classes");
    for r in &generated.records {
        let tag = if r.label == Label::Glaucoma { "g" } else { "n" };
        let name = r.image_path.file_name().unwrap().to_string_lossy().into_owned();
        copy(&r.image_path, &named.join(format!("im_{tag}_{name}")));
        let class = if r.label == Label::Glaucoma { "glaucoma" } else { "normal" };
        copy(&r.image_path, &dirs.join(class).join(&name));
    }
    std::fs::write(named.join("broken.png"), b"not an image").unwrap();
    let by_name = ingest(&named, DatasetId::Acrima, "acrima_filename")?;
    println!("acrima_filename skipped {} unreadable file(s)", by_name.warnings.skipped.len());
    report(&by_name.manifest);
    report(&ingest(&dirs, DatasetId::RimOne, "class_dirs")?.manifest);

    let csv = tmp.path().join("manifest.csv");
    by_name.manifest.write_csv(&csv)?;
    println!("{}", std::fs::read_to_string(&csv).unwrap().lines().take(3).collect::<Vec<_>>().join("\n"));
    Ok(())
}

fn copy(from: &Path, to: &Path) {
    std::fs::create_dir_all(to.parent().unwrap()).unwrap();
    std::fs::copy(from, to).unwrap();
}

fn report(m: &fundusbench::datasets::DatasetManifest) {
    println!(
        "{}: {} records, {} normal / {} glaucoma, fingerprint {}",
        m.dataset_id,
        m.len(),
        m.count(Label::Normal),
        m.count(Label::Glaucoma),
        &m.source_fingerprint[..16]
    );
}
