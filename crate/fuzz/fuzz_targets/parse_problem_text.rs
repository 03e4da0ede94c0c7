#![no_main]

use libfuzzer_sys::fuzz_target;
use orthosync::format::{parse_problem_text, problem_to_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = parse_problem_text(text) {
        assert_eq!(parse_problem_text(&problem_to_text(&p)).unwrap(), p);
    }
});
