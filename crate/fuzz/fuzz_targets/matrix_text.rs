#![no_main]

use libfuzzer_sys::fuzz_target;
use pipemerge::verify::Matrix;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Matrix::parse_text(text) {
        let again = Matrix::parse_text(&m.to_text()).expect("rendered matrix parses");
        assert_eq!(m, again);
    }
});
