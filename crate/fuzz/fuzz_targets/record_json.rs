#![no_main]

use fabric_core::gateway::Record;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = Record::from_json(data);
});
