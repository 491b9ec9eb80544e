//! Resolves a run configuration from defaults, a TOML file and overrides.
//!
//! `cargo run -p fundusbench --example config_overrides [CONFIG.toml] [KEY=VALUE ...]`

use std::path::PathBuf;

use fundusbench::config::{valid_keys, RunConfig};

fn main() {
    let mut args = std::env::args().skip(1).peekable();
    let file = args.next_if(|a| !a.contains('=')).map(PathBuf::from);
    let mut overrides: Vec<String> = args.collect();
    if overrides.is_empty() {
        overrides = vec!["training.phases[0].max_epochs=1".into(), "preprocess.variant=enhanced".into()];
    }
    match RunConfig::load(file.as_deref(), &overrides) {
        Ok(cfg) => print!("{}", cfg.to_toml()),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
    println!("# {} settable keys, e.g. {}", valid_keys().len(), valid_keys()[..3].join(", "));
    let err = RunConfig::load(None, &["training.early_stopping.patiense=2".into()]).unwrap_err();
    println!("# a misspelt key exits with code {}", err.exit_code());
}
