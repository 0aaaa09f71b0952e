//! Replays the checked-in fuzz corpus through the same entry points the fuzz
//! targets call, so the seeds stay valid and never panic.

use std::fs;
use std::path::{Path, PathBuf};

use tat_core::data::{generate_synthetic, parse_csv, parse_jsonl, DatasetSchema, GeneratorConfig};
use tat_core::model::ModelConfig;
use tat_core::training::{checkpoint_from_str, TrainConfig};

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "fuzz", "corpus", target].iter().collect();
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&path).unwrap())
        })
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).expect("seeds are UTF-8")
}

/// Seeds whose name starts with one of these are expected to be rejected.
fn expect_ok(name: &str) -> bool {
    !["truncated", "future", "short", "header_only", "blank"].iter().any(|p| name.starts_with(p))
}

fn check(target: &str, run: impl Fn(&[u8]) -> bool) {
    for (name, bytes) in corpus(target) {
        assert_eq!(run(&bytes), expect_ok(&name), "{target}/{name}");
    }
}

#[test]
fn dataset_parsers() {
    let schema = GeneratorConfig::micro().schema();
    check("parse_jsonl", |b| parse_jsonl(text(b), &schema).is_ok_and(|d| !d.is_empty()));
    check("parse_csv", |b| parse_csv(text(b), &schema).is_ok_and(|d| !d.is_empty()));
}

#[test]
fn config_decoders() {
    check("schema", |b| serde_json::from_slice::<DatasetSchema>(b).is_ok_and(|s| s.validate().is_ok()));
    check("generator_config", |b| {
        serde_json::from_slice::<GeneratorConfig>(b).is_ok_and(|c| {
            c.validate().is_ok() && (c.n_series * c.t_total > 20_000 || generate_synthetic(&c).is_ok())
        })
    });
    check("model_config", |b| serde_json::from_slice::<ModelConfig>(b).is_ok_and(|c| c.validate().is_ok()));
    check("train_config", |b| serde_json::from_slice::<TrainConfig>(b).is_ok_and(|c| c.validate().is_ok()));
}

#[test]
fn checkpoint_decoder() {
    check("checkpoint", |b| std::str::from_utf8(b).is_ok_and(|t| checkpoint_from_str(t).is_ok()));
}

#[test]
fn every_fuzz_target_has_seeds() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz");
    for entry in fs::read_dir(root.join("fuzz_targets")).unwrap() {
        let path = entry.unwrap().path();
        let target = path.file_stem().unwrap().to_string_lossy().into_owned();
        assert!(!corpus(&target).is_empty());
    }
}
