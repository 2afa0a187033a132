#![no_main]

use fedbench::data::parse_csv_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_csv_dataset(data, "label");
    let _ = parse_csv_dataset(data, "y");
});
