#![no_main]

use libfuzzer_sys::fuzz_target;
use orthosync::format::{parse_kv, write_kv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(map) = parse_kv(text) {
        let pairs: Vec<(String, String)> = map.clone().into_iter().collect();
        let again = parse_kv(&write_kv(&pairs).unwrap()).unwrap();
        assert_eq!(again, map);
    }
});
