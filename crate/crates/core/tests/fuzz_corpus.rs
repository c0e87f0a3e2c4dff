//! Replays the checked-in fuzz seeds through the same entry points the fuzz
//! targets drive, so a seed that panics is caught on stable too.

use std::fs;
use std::path::PathBuf;

use ltsa::checkpoint::{decode_tensors, parse_manifest};
use ltsa::cohort::io::{decode_image, encode_image, group_manifest, parse_hazard_list, parse_manifest as parse_rows, parse_splits, parse_truth};
use ltsa::survival::TimeGrid;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<Vec<u8>> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read(e.unwrap().path()).unwrap())
        .collect();
    assert!(!out.is_empty(), "no seeds for {target}");
    out.sort();
    out
}

#[test]
fn image_seeds_round_trip() {
    let mut decoded = 0;
    for s in seeds("image_decode") {
        if let Ok(img) = decode_image(&s) {
            assert_eq!(encode_image(&img), s);
            decoded += 1;
        }
    }
    assert!(decoded > 0);
}

#[test]
fn manifest_seeds_parse_or_fail_cleanly() {
    let grid = TimeGrid::new(6, 27).unwrap();
    let mut grouped = 0;
    for s in seeds("manifest_parse") {
        if let Ok(rows) = parse_rows(s.as_slice()) {
            if let Ok(eyes) = group_manifest(&rows, &grid) {
                grouped += eyes.len();
            }
        }
    }
    assert!(grouped > 0);
}

#[test]
fn checkpoint_seeds_decode_or_fail_cleanly() {
    let mut ok = 0;
    for s in seeds("checkpoint_manifest") {
        let split = s.iter().position(|&b| b == 0).unwrap_or(s.len());
        let entries = parse_manifest(std::str::from_utf8(&s[..split]).unwrap()).unwrap();
        if decode_tensors(&entries, s.get(split + 1..).unwrap_or(&[])).is_ok() {
            ok += 1;
        }
    }
    assert_eq!(ok, 1);
}

#[test]
fn truth_and_split_seeds_parse() {
    for s in seeds("truth_parse") {
        if let Ok(rows) = parse_truth(s.as_slice()) {
            for r in &rows {
                parse_hazard_list(&r.true_hazard).unwrap();
            }
        } else {
            parse_hazard_list(std::str::from_utf8(&s).unwrap()).unwrap();
        }
    }
    for s in seeds("splits_parse") {
        assert!(!parse_splits(s.as_slice()).unwrap().assignment.is_empty());
    }
}
