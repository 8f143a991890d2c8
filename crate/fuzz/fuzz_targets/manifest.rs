#![no_main]

use csmil::datamodel::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::from_json_str(text) {
            assert!(!m.bags.is_empty());
            assert!(m.bags.iter().all(|b| b.label <= 1));
        }
    }
});
