#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // A bundle that validates must be usable: predict and the gradient
        // may return errors but must not panic.
        if let Ok(predictor) = rarescreen::predictor::Predictor::from_json(text) {
            let gamma = vec![0.5; predictor.input_dim()];
            let _ = predictor.predict(&gamma);
            let _ = predictor.prediction_gradient(&gamma, 0);
        }
    }
});
