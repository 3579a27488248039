#![no_main]

use fabric_core::access::verify_token;
use fabric_core::time::Timestamp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(token) = std::str::from_utf8(data) {
        let now = Timestamp::parse("2024-06-01T00:00:00Z").unwrap();
        let _ = verify_token(token, b"fuzz-key", now);
    }
});
