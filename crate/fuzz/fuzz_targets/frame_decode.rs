#![no_main]

use fedbench::wire::{decode_frame, encode_frame};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Decoding is strict (no trailing payload, canonical lengths), so any
    // frame that decodes must re-encode to exactly the bytes consumed.
    if let Ok((msg, consumed)) = decode_frame(data) {
        assert_eq!(encode_frame(&msg), &data[..consumed]);
    }
});
