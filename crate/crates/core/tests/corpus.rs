//! The fuzz seed corpora must stay valid inputs for their decoders.

use std::path::{Path, PathBuf};

use adtr::checkpoint;
use adtr::config::RunConfig;
use adtr::feature_io::{decode_sample, write_sample, DatasetManifest};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn sample_seeds_round_trip() {
    for (path, bytes) in seeds("sample") {
        let record = decode_sample(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let mut again = Vec::new();
        write_sample(&record, &mut again).unwrap();
        assert_eq!(again, bytes);
    }
}

#[test]
fn manifest_seeds_parse() {
    for (path, bytes) in seeds("manifest") {
        let m = DatasetManifest::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }
}

#[test]
fn checkpoint_seeds_round_trip() {
    for (path, bytes) in seeds("checkpoint") {
        let (config, params) = checkpoint::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(checkpoint::encode(&config, &params), bytes);
    }
}

#[test]
fn config_seeds_parse() {
    for (path, bytes) in seeds("config") {
        let c = RunConfig::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
