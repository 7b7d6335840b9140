#![no_main]

use libfuzzer_sys::fuzz_target;
use pipemerge::model::ClusterSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = ClusterSpec::from_json(text) {
        let again = ClusterSpec::from_json(&c.to_json()).expect("rendered cluster parses");
        assert_eq!(c, again);
    }
});
