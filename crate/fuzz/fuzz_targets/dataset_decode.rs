#![no_main]

use libfuzzer_sys::fuzz_target;
use pinncast::data::{decode_values, parse_manifest};

// The manifest of a tiny valid dataset; its blob lives in the corpus, so
// the fuzzer starts from an accepting (manifest, blob) pair and mutates
// the blob against the declared length and checksum.
const VALID_MANIFEST: &[u8] = include_bytes!("../corpus/dataset_decode/valid_manifest");

fuzz_target!(|data: &[u8]| {
    // Arbitrary bytes as a manifest, then as that manifest's blob.
    if let Ok(manifest) = parse_manifest(data) {
        let _ = decode_values(&manifest, data);
    }
    // Arbitrary bytes as a blob for a known-good manifest.
    let manifest = parse_manifest(VALID_MANIFEST).expect("checked-in manifest is valid");
    let _ = decode_values(&manifest, data);
});
