#![no_main]

use libfuzzer_sys::fuzz_target;
use tat_core::data::{parse_csv, GeneratorConfig};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_csv(text, &GeneratorConfig::micro().schema());
    }
});
