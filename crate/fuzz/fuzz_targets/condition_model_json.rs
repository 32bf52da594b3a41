#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(model) = rarescreen::density::ConditionModel::from_json(text) {
            let tau = vec![0.0; model.output_dim];
            let _ = model.presence_at(&tau);
        }
    }
});
