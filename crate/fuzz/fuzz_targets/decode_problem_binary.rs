#![no_main]

use libfuzzer_sys::fuzz_target;
use orthosync::format::{decode_problem, encode_problem};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_problem(data) {
        assert_eq!(encode_problem(&p), data);
    }
});
