#![no_main]

use fabric_core::time::Timestamp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = Timestamp::parse(text) {
            assert_eq!(Timestamp::parse(&t.to_string()).unwrap(), t);
        }
    }
});
