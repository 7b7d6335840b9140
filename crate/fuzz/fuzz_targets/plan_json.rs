#![no_main]

use libfuzzer_sys::fuzz_target;
use pipemerge::model::ModelGraph;
use pipemerge::partition::PartitionPlan;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = PartitionPlan::decode(text) {
        let again = PartitionPlan::decode(&plan.to_json()).expect("rendered plan decodes");
        assert_eq!(plan, again);
        // validation against a fixed model must not panic either
        let g = ModelGraph::dense_chain("fuzz", &[4, 8, 8, 4]).unwrap();
        let _ = plan.validate(&g, None);
    }
});
