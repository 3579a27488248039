#![no_main]

use fabric_core::pipeline::{export, import};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = import(text) {
        let back = import(&export(&spec).to_document()).unwrap();
        assert_eq!(back, spec.canonical());
    }
});
