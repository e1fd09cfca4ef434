#![no_main]

use ems_core::train::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        // Compare bytes rather than values so NaN payloads count as equal.
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).expect("saved checkpoint loads").to_bytes(), bytes);
    }
});
