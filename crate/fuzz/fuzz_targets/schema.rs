#![no_main]

use libfuzzer_sys::fuzz_target;
use tat_core::data::DatasetSchema;

fuzz_target!(|data: &[u8]| {
    if let Ok(schema) = serde_json::from_slice::<DatasetSchema>(data) {
        let _ = schema.validate();
    }
});
