#![no_main]

use fedbench::data::parse_cifar10_records;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_cifar10_records(data);
});
