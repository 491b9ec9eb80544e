//! Runs either experiment at toy scale and regenerates its figures.
//!
//! `cargo run -p fundusbench --example run_experiment [exp1|exp2] [OUTPUT_DIR]`

use fundusbench::config::RunConfig;
use fundusbench::experiments::{emit_figures, run_experiment, ExperimentReport};

fn main() -> fundusbench::Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let mut args = std::env::args().skip(1);
    let id = args.next().unwrap_or_else(|| "exp2".into());
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("fundus_runs").display().to_string());
    let overrides: Vec<String> = [
        format!("experiment.id={}", id.parse::<fundusbench::config::ExperimentId>()?),
        format!("output_dir={out:?}"),
        "data.synthetic.n_per_class=12".into(),
        "data.synthetic.image_size=64".into(),
        "preprocess.target_size=48".into(),
        "model.pretrained=false".into(),
        "training.phases[0].max_epochs=3".into(),
        "training.phases[1].max_epochs=2".into(),
        "training.phases[0].batch_size=8".into(),
        "training.phases[1].batch_size=8".into(),
    ]
    .into();
    let cfg = RunConfig::load(None, &overrides)?;
    let run = run_experiment(&cfg)?;
    print!("{}", run.report.tables_csv());
    for note in &run.report.notes {
        println!("note: {note}");
    }
    if let Some(o) = run.report.runs.iter().find_map(|r| r.ordering.as_ref()) {
        println!("ordering ACRIMA > RIMONE > ORIGA: {} {:?}", o.pass, o.aucs);
    }

    let report = ExperimentReport::read(&run.dir.join("report.json"))?;
    let again = run.dir.join("figures_again");
    let files = emit_figures(&report, &again)?;
    let same = files.iter().all(|f| {
        let first = run.dir.join("figures").join(f.file_name().unwrap());
        std::fs::read(f).ok() == std::fs::read(first).ok()
    });
    println!("{} figure files regenerated from report.json, byte-identical: {same}", files.len());
    println!("artifacts: {}", run.dir.display());
    Ok(())
}
