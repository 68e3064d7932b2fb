//! Replays the checked-in fuzz corpus through the same round-trip checks the
//! fuzz targets make, so the seeds stay meaningful on stable toolchains.

use geoproto::checkpoint::Checkpoint;
use geoproto::config::RunConfig;
use geoproto::episodes::parse_manifest;
use geoproto::geometry::pgm::Greymap;
use std::path::PathBuf;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (name, data) in seeds("parse_config") {
        let cfg = RunConfig::parse(std::str::from_utf8(&data).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again.to_text(), cfg.to_text(), "{name}");
    }
}

#[test]
fn checkpoint_seeds_decode_and_round_trip() {
    for (name, data) in seeds("decode_checkpoint") {
        let ck = Checkpoint::decode(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ck.encode(), data, "{name}");
        assert!(Checkpoint::decode(&data[..data.len() - 1]).is_err(), "{name} truncated");
    }
}

#[test]
fn pgm_seeds_decode_and_round_trip() {
    for (name, data) in seeds("decode_pgm") {
        let img = Greymap::decode(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(Greymap::decode(&img.encode()).unwrap(), img, "{name}");
    }
}

#[test]
fn manifest_seeds_parse() {
    for (name, data) in seeds("parse_manifest") {
        let entries = parse_manifest(std::str::from_utf8(&data).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!entries.is_empty(), "{name}");
    }
}
