#![no_main]

use fsdm_core::harness::io::{decode_points_csv, encode_points_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(points) = decode_points_csv(data) {
        let text = encode_points_csv(&points).expect("2-D points encode");
        assert_eq!(decode_points_csv(&text).expect("round trip"), points);
    }
});
