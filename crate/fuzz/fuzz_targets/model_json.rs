#![no_main]

use libfuzzer_sys::fuzz_target;
use pipemerge::model::ModelGraph;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = ModelGraph::from_json(text) {
        let again = ModelGraph::from_json(&g.to_json()).expect("rendered model parses");
        assert_eq!(g, again);
    }
});
