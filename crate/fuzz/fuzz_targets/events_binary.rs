#![no_main]

use ems_core::encoding::{parse_events_binary, write_events_binary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(events) = parse_events_binary(data) {
        // Accepted input is canonical: padding is zero and nothing trails.
        assert_eq!(write_events_binary(&events), data);
    }
});
