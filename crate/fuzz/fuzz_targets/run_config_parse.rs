#![no_main]

use libfuzzer_sys::fuzz_target;
use pinncast::train::RunConfig;

// Run configs are user-supplied JSON (`train --config`); parse + validate
// must never panic.
fuzz_target!(|data: &[u8]| {
    if let Ok(config) = serde_json::from_slice::<RunConfig>(data) {
        let _ = config.validate();
    }
});
