#![no_main]

use fedbench_cli::plan::PlanFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Parsed plans re-render and reparse to the same value: the JSON number
    // reader is configured for exact float round-trips.
    if let Ok(plan) = PlanFile::parse(data) {
        let rendered = plan.to_json();
        let reparsed = PlanFile::parse(rendered.as_bytes()).expect("rendered plan no longer parses");
        assert_eq!(plan, reparsed);
    }
});
