#![no_main]

use cina::data::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::from_json_str(text) {
        let back = Manifest::from_json_str(&m.to_json_string()).expect("re-parse");
        assert_eq!(back, m);
    }
});
