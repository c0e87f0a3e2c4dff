#![no_main]

use libfuzzer_sys::fuzz_target;
use ltsa::cohort::io::{group_manifest, parse_manifest};
use ltsa::survival::TimeGrid;

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = parse_manifest(data) else { return };
    let grid = TimeGrid::new(6, 27).unwrap();
    if let Ok(eyes) = group_manifest(&rows, &grid) {
        for e in &eyes {
            assert!(e.visit_months.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(e.visit_months.len(), e.image_paths.len());
        }
    }
});
