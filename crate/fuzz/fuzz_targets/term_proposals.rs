#![no_main]

use fabric_core::model::parse_term_proposals;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_term_proposals(text);
    }
});
