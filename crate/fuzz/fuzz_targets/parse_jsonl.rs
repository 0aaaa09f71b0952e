#![no_main]

use libfuzzer_sys::fuzz_target;
use tat_core::data::{parse_jsonl, GeneratorConfig};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_jsonl(text, &GeneratorConfig::micro().schema());
    }
});
