#![no_main]

use libfuzzer_sys::fuzz_target;
use ltsa::cohort::io::{parse_hazard_list, parse_truth};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_truth(data) {
        for r in &rows {
            let _ = parse_hazard_list(&r.true_hazard);
        }
    }
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(h) = parse_hazard_list(text) {
            assert!(h.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
});
