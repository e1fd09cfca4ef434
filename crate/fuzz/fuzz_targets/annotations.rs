#![no_main]

use ems_core::encoding::{parse_annotations_jsonl, write_annotations_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(anns) = parse_annotations_jsonl(text) {
        let again = parse_annotations_jsonl(&write_annotations_jsonl(&anns)).expect("written annotations parse");
        assert_eq!(again, anns);
    }
});
