#![no_main]

use std::path::Path;

use kinet::pipeline::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(videos) = parse_manifest(text, Path::new("/data")) {
            for v in videos {
                for f in &v.frame_paths {
                    assert!(f.starts_with("/data"));
                }
            }
        }
    }
});
