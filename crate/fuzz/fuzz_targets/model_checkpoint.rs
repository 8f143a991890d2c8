#![no_main]

use csmil::CsmilModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = CsmilModel::from_json_str(text) {
            let again = CsmilModel::from_json_str(std::str::from_utf8(&m.to_json_bytes().unwrap()).unwrap()).unwrap();
            assert_eq!(again.params, m.params);
        }
    }
});
