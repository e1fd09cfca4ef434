#![no_main]

use ems_core::detection::{parse_detections_jsonl, write_detections_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_detections_jsonl(text) {
        let again = parse_detections_jsonl(&write_detections_jsonl(&records)).expect("written detections parse");
        assert_eq!(again, records);
    }
});
