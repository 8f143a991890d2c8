#![no_main]

use csmil::datamodel::{decode_bag, encode_bag, HEADER_LEN};
use csmil::Bag;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_bag(data) {
        assert_eq!(data.len(), HEADER_LEN + 4 * m.len());
        assert!(m.iter().all(|v| v.is_finite()));
        let bag = Bag::new("fuzz", 0, m).expect("decoded bags are valid");
        assert_eq!(encode_bag(&bag).expect("re-encodes"), data);
    }
});
