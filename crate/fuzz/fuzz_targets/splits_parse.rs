#![no_main]

use libfuzzer_sys::fuzz_target;
use ltsa::cohort::io::parse_splits;

fuzz_target!(|data: &[u8]| {
    let _ = parse_splits(data);
});
