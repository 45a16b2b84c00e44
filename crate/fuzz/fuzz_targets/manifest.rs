#![no_main]

use adtr::feature_io::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(manifest) = DatasetManifest::parse(text) {
        let again = DatasetManifest::parse(&manifest.to_text()).expect("rendered manifests parse");
        assert_eq!(again.entries, manifest.entries);
        assert_eq!(again.seed, manifest.seed);
    }
});
