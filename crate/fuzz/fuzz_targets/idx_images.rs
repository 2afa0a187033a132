#![no_main]

use fedbench::data::parse_idx_images;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_idx_images(data);
});
