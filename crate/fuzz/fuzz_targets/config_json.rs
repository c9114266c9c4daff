#![no_main]

use fsdm_core::harness::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = RunConfig::from_json(data) {
        assert_eq!(RunConfig::from_json(&cfg.to_json()).expect("round trip"), cfg);
    }
});
