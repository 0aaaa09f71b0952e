#![no_main]

use libfuzzer_sys::fuzz_target;
use tat_core::training::checkpoint_from_str;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = checkpoint_from_str(text);
    }
});
