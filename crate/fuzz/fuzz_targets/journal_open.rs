#![no_main]

use fabric_core::journal::{Durability, Journal};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    std::fs::write(&path, data).unwrap();
    let Ok((_, events)) = Journal::<serde_json::Value>::open(&path, Durability::Buffered) else {
        return;
    };
    // Recovery is idempotent: a second open sees the same events.
    let (_, again) = Journal::<serde_json::Value>::open(&path, Durability::Buffered).unwrap();
    assert_eq!(events, again);
});
