use std::path::Path;

use erasure_lab::harness::{parse_config, RunConfig};

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn every_shipped_config_parses() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            parse_config(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn default_config_spells_out_the_builtin_defaults() {
    let cfg = parse_config(&configs_dir().join("default.toml")).unwrap();
    assert_eq!(cfg.digest().unwrap(), RunConfig::default().digest().unwrap());
}
