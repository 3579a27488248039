#![no_main]

use fabric_core::pipeline::{builtin_registry, load_pipeline, plan, verify_pipeline};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let registry = builtin_registry();
    if let Ok(spec) = load_pipeline(text, &registry) {
        // Anything that loads must verify and plan without panicking.
        if verify_pipeline(&spec, &registry).is_ok() {
            let stages = plan(&spec).stages;
            assert_eq!(stages.iter().map(Vec::len).sum::<usize>(), spec.nodes.len());
        }
    }
});
