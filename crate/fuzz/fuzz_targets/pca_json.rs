#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Deserialization + structural validation must never panic; a valid
        // model must also survive a projection call.
        if let Ok(model) = rarescreen::pca::PcaModel::from_json(text) {
            let gamma = vec![0.25; model.p];
            let _ = rarescreen::pca::project(&model, &gamma);
        }
    }
});
