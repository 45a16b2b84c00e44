#![no_main]

use adtr::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::parse(text) {
        let again = RunConfig::parse(&config.to_text()).expect("rendered configs parse");
        assert_eq!(again.to_text(), config.to_text());
    }
});
