#![no_main]

use libfuzzer_sys::fuzz_target;
use rarescreen::preprocess::{preprocess_fundus, PreprocessOptions};

fuzz_target!(|data: &[u8]| {
    // Decode first so oversized decode bombs are skipped before the O(w*h)
    // normalization runs.
    let Ok(decoded) = image::load_from_memory(data) else {
        return;
    };
    let rgb = decoded.to_rgb8();
    if rgb.width() > 512 || rgb.height() > 512 {
        return;
    }
    let _ = preprocess_fundus(&rgb, &PreprocessOptions::default());
});
