#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    // Projection/embedding tables (`sample_id,<v0>,...`).
    let _ = rarescreen::tsne::parse_vector_csv(data, Path::new("fuzz.csv"));
});
