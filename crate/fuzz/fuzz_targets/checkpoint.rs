#![no_main]

use adtr::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((config, params)) = decode(data) {
        assert_eq!(encode(&config, &params), data);
    }
});
