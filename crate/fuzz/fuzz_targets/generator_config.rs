#![no_main]

use libfuzzer_sys::fuzz_target;
use tat_core::data::{generate_synthetic, GeneratorConfig};

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = serde_json::from_slice::<GeneratorConfig>(data) {
        // keep accepted configs cheap enough to simulate
        if config.validate().is_ok() && config.n_series.saturating_mul(config.t_total) <= 20_000 {
            let _ = generate_synthetic(&config);
        }
    }
});
