#![no_main]

use kinet::distill::parse_label_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_label_manifest(text);
    }
});
