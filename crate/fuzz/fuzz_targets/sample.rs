#![no_main]

use adtr::feature_io::{decode_sample, write_sample};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(record) = decode_sample(data) {
        let mut out = Vec::new();
        write_sample(&record, &mut out).expect("decoded records are valid");
        assert_eq!(out, data);
    }
});
