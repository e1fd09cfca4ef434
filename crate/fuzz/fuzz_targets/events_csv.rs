#![no_main]

use ems_core::encoding::{parse_events_csv, write_events_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(events) = parse_events_csv(text) {
        let again = parse_events_csv(&write_events_csv(&events)).expect("written CSV parses");
        assert_eq!(again, events);
    }
});
