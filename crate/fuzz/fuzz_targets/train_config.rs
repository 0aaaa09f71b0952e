#![no_main]

use libfuzzer_sys::fuzz_target;
use tat_core::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = serde_json::from_slice::<TrainConfig>(data) {
        let _ = config.validate();
    }
});
