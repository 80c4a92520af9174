#![no_main]

use libfuzzer_sys::fuzz_target;

// Checkpoint files are untrusted input to `eval`; decoding must reject
// malformed bytes with an error, never a panic or unbounded allocation.
fuzz_target!(|data: &[u8]| {
    let _ = pinncast::checkpoint::decode(data);
});
