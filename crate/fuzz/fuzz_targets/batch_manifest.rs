#![no_main]

use fabric_core::gateway::parse_batch_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_batch_manifest(data);
});
