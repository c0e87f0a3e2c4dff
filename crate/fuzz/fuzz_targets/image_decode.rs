#![no_main]

use libfuzzer_sys::fuzz_target;
use ltsa::cohort::io::{decode_image, encode_image};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        // Anything that decodes must re-encode to the same bytes.
        assert_eq!(encode_image(&img), data);
    }
});
