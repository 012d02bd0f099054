#![no_main]

use cina::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = Dataset::from_csv_str("fuzz", text) {
        let back = Dataset::from_csv_str("fuzz", &d.to_csv_string()).expect("re-parse");
        assert_eq!(back, d);
    }
});
