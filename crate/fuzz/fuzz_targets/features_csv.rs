#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    // The features parser must reject malformed input without panicking.
    let _ = rarescreen::dataset::parse_features_csv(data, Path::new("fuzz.csv"));
});
