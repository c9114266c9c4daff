#![no_main]

use fsdm_core::harness::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&ck.to_bytes()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.config, ck.config);
        assert_eq!(again.to_bytes(), ck.to_bytes());
    }
});
