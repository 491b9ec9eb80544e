//! Threshold metrics, ROC and AUC, with a figure.
//!
//! `cargo run -p fundusbench --example metrics_roc [OUT_DIR]`

use std::path::PathBuf;

use fundusbench::metrics::{auc_bruteforce, evaluate_scores, scalar_metrics, ConfusionCounts};
use fundusbench::plot::charts::roc_chart;
use fundusbench::plot::line_chart;

fn main() -> fundusbench::Result<()> {
    let c = ConfusionCounts { tp: 482, fn_: 518, tn: 949, fp: 51 };
    let m = scalar_metrics(&c);
    println!(
        "tp 482 fn 518 tn 949 fp 51 -> sensitivity {:.3}, specificity {:.3}, accuracy {:.4}",
        m.sensitivity.unwrap(),
        m.specificity.unwrap(),
        m.accuracy.unwrap()
    );

    let scores = [0.95, 0.9, 0.8, 0.8, 0.7, 0.6, 0.55, 0.4, 0.3, 0.2, 0.1, 0.05];
    let labels = [1, 1, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0];
    let e = evaluate_scores("demo", &scores, &labels, 0.5)?;
    println!(
        "threshold 0.5: {:?}, precision {:?}, f1 {:?}, AUC {:?}",
        e.confusion, e.precision, e.f1, e.auc
    );
    println!("pairwise AUC {:.6}", auc_bruteforce(&scores, &labels)?);

    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fundus_roc"));
    let roc = e.roc.expect("both classes present");
    let files = line_chart(&roc_chart("ROC demo", &[("demo".into(), &roc)])).write(&out, "roc_demo")?;
    println!("figure: {files:?}");
    Ok(())
}
