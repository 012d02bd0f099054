#![no_main]

use cina::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = Checkpoint::from_json_str(text) {
        let back = Checkpoint::from_json_str(&c.to_json_string()).expect("re-parse");
        assert_eq!(back, c);
    }
});
