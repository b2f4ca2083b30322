//! Runs the fuzz targets' checks over the checked-in seed corpora.

use std::fs;
use std::path::{Path, PathBuf};

use kinet::checkpoint::Checkpoint;
use kinet::config::RunConfig;
use kinet::distill::{parse_label_manifest, BinaryMask};
use kinet::pipeline::parse_manifest;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn checkpoint_seeds() {
    let mut decoded = 0;
    for (p, bytes) in seeds("checkpoint_decode") {
        if let Ok(ck) = Checkpoint::decode(&bytes) {
            assert_eq!(ck.encode().unwrap(), bytes, "{}", p.display());
            decoded += 1;
        }
    }
    assert!(decoded >= 1);
}

#[test]
fn dataset_manifest_seeds() {
    let mut parsed = 0;
    for (_, bytes) in seeds("dataset_manifest") {
        if let Ok(videos) = parse_manifest(std::str::from_utf8(&bytes).unwrap(), Path::new("/data")) {
            assert!(videos
                .iter()
                .flat_map(|v| &v.frame_paths)
                .all(|f| f.starts_with("/data")));
            parsed += 1;
        }
    }
    assert!(parsed >= 1);
}

#[test]
fn label_manifest_seeds() {
    for (p, bytes) in seeds("label_manifest") {
        let rows = parse_label_manifest(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert!(!rows.is_empty(), "{}", p.display());
    }
}

#[test]
fn run_config_seeds() {
    for (p, bytes) in seeds("run_config") {
        let cfg =
            RunConfig::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn mask_png_seeds() {
    for (_, bytes) in seeds("mask_png") {
        let mask = BinaryMask::decode_png(&bytes).unwrap();
        assert_eq!(BinaryMask::decode_png(&mask.encode_png().unwrap()).unwrap(), mask);
    }
}
