#![no_main]

use csmil::ClusterModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = ClusterModel::from_json_str(text) {
            assert_eq!(m.centers.dim(), (m.k, m.dim));
        }
    }
});
