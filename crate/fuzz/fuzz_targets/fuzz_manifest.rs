#![no_main]

use farnet::data::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_manifest(text) {
        // Parsed manifests passed validation, so split lookups are in range.
        for &id in m.splits.train.iter().chain(&m.splits.val).chain(&m.splits.test) {
            let t = &m.triplets[id];
            let _ = &m.gallery[t.reference];
            let _ = &m.gallery[t.target];
        }
    }
});
