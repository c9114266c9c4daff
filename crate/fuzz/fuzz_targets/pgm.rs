#![no_main]

use fsdm_core::harness::io::{decode_pgm, encode_pgm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let bytes = encode_pgm(&img).expect("decoded image encodes");
        assert_eq!(decode_pgm(&bytes).expect("round trip"), img);
    }
});
