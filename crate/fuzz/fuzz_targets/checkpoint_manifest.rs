#![no_main]

use libfuzzer_sys::fuzz_target;
use ltsa::checkpoint::{decode_tensors, parse_manifest};

// Input: manifest text, a NUL byte, then the tensor blob.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let Ok(entries) = parse_manifest(text) else { return };
    let blob = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(tensors) = decode_tensors(&entries, blob) {
        assert_eq!(tensors.len(), entries.len());
    }
});
