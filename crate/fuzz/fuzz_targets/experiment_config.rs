#![no_main]

use fedbench_cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Anything that parses must survive a serialize/reparse cycle.
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        if let Ok(rendered) = cfg.to_toml() {
            ExperimentConfig::parse(&rendered).expect("rendered config no longer parses");
        }
    }
});
