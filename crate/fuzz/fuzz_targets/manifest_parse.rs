#![no_main]

use libfuzzer_sys::fuzz_target;

// Dataset manifests come from disk and must never panic the parser,
// whatever the bytes. Valid manifests must also satisfy their own
// internal consistency checks.
fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = pinncast::data::parse_manifest(data) {
        // A manifest that parsed must re-validate.
        assert!(manifest.validate().is_ok());
    }
});
