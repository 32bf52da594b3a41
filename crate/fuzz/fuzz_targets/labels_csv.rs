#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    let _ = rarescreen::dataset::parse_labels_csv(data, Path::new("fuzz.csv"));
});
