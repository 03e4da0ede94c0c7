#![no_main]

use libfuzzer_sys::fuzz_target;
use orthosync::format::{parse_stack_text, stack_to_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(s) = parse_stack_text(text) {
        assert_eq!(parse_stack_text(&stack_to_text(&s)).unwrap(), s);
    }
});
