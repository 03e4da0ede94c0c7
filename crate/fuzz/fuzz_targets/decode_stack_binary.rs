#![no_main]

use libfuzzer_sys::fuzz_target;
use orthosync::format::{decode_stack, encode_stack};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = decode_stack(data) {
        assert_eq!(encode_stack(&s), data);
    }
});
