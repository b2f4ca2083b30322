#![no_main]

use kinet::distill::BinaryMask;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = BinaryMask::decode_png(data) {
        let bytes = mask.encode_png().expect("decoded mask encodes");
        assert_eq!(BinaryMask::decode_png(&bytes).expect("re-decodes"), mask);
    }
});
