use pipemerge::cost::{task_costs, total_cost, CostParams};
use pipemerge::model::{ClusterSpec, DeviceSpec, ModelGraph};
use pipemerge::optimize::{candidate_count, optimize_plan, OptimizeConfig, SearchKind, TotalCost};
use pipemerge::partition::{BoundaryComm, PartitionPlan, PlanOptions};
use proptest::prelude::*;

/// Every split of the chain into contiguous spans and every choice of
/// boundary kinds, built straight from bitmasks.
fn brute_force(g: &ModelGraph, n: usize, params: &CostParams, opts: PlanOptions) -> (f64, usize) {
    let layers = g.len();
    let devices: Vec<usize> = (1..=n).collect();
    let mut best = f64::INFINITY;
    let mut count = 0;
    for cut_mask in 0u32..(1 << (layers - 1)) {
        let mut spans = Vec::new();
        let mut first = 1;
        for l in 1..layers {
            if cut_mask & (1 << (l - 1)) != 0 {
                spans.push((first, l));
                first = l + 1;
            }
        }
        spans.push((first, layers));
        let z = spans.len();
        let base = PartitionPlan::from_spans(g, &spans, &vec![devices.clone(); z], opts).unwrap();
        for kind_mask in 0u32..(1 << (z - 1)) {
            let mut plan = base.clone();
            for (k, b) in plan.boundaries.iter_mut().enumerate() {
                if kind_mask & (1 << k) != 0 {
                    *b = BoundaryComm::Direct;
                }
            }
            let v = total_cost(&task_costs(&plan, g, params).unwrap());
            best = best.min(v);
            count += 1;
        }
    }
    (best, count)
}

fn cluster(speeds: &[f64], latency: f64, bandwidth: f64) -> ClusterSpec {
    ClusterSpec {
        devices: speeds
            .iter()
            .enumerate()
            .map(|(i, &s)| DeviceSpec {
                id: i + 1,
                flops_per_sec: s,
                mem_bytes: 1 << 30,
            })
            .collect(),
        link_latency_s: latency,
        link_bandwidth_bps: bandwidth,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn exhaustive_search_finds_the_brute_force_optimum(
        widths in prop::collection::vec(3usize..=16, 2..=7),
        speeds in prop::collection::vec(1e6f64..1e8, 3),
        n in 1usize..=3,
        latency in 0.0f64..1e-3,
        bandwidth in 1e5f64..1e9,
        samples in prop::collection::vec(1u64..=8, 1..=4),
    ) {
        let g = ModelGraph::dense_chain("net", &widths).unwrap().default_costs(4);
        let c = cluster(&speeds[..n], latency, bandwidth);
        let mut cfg = OptimizeConfig::new(c.clone(), n, samples.clone());
        cfg.zmax = Some(g.len());
        let report = optimize_plan(&g, &cfg, &TotalCost).unwrap();
        prop_assert_eq!(report.search, SearchKind::Exhaustive);

        let params = CostParams { cluster: c, microbatch_samples: samples, overlap_comm: false };
        let (best, count) = brute_force(&g, n, &params, PlanOptions::default());
        prop_assert_eq!(count as u64, candidate_count(g.len(), g.len()));
        prop_assert_eq!(report.candidates_evaluated, count);
        prop_assert!((report.objective - best).abs() <= 1e-12 * best.abs().max(1e-300), "{} vs {}", report.objective, best);
        let recomputed = total_cost(&task_costs(&report.plan, &g, &params).unwrap());
        prop_assert_eq!(recomputed, report.objective);
    }

    #[test]
    fn greedy_search_respects_budget_and_improves_on_start(
        widths in prop::collection::vec(3usize..=16, 14..=18),
        n in 1usize..=3,
        budget in 1usize..=12,
    ) {
        let g = ModelGraph::dense_chain("long", &widths).unwrap().default_costs(4);
        let c = ClusterSpec::uniform(n, 1e7, 1 << 30, 1e-4, 1e6);
        let mut cfg = OptimizeConfig::new(c, n, vec![4, 4]);
        cfg.zmax = Some(g.len());
        let params = cfg.cost_params();
        let start = pipemerge::partition::build_plan(&g, n, n.min(g.len()), PlanOptions::default()).unwrap();
        let start_cost = total_cost(&task_costs(&start, &g, &params).unwrap());
        cfg.budget = budget;
        let greedy = optimize_plan(&g, &cfg, &TotalCost).unwrap();
        prop_assert_eq!(greedy.search, SearchKind::Greedy);
        prop_assert!(greedy.candidates_evaluated <= budget);
        greedy.plan.validate(&g, None).unwrap();
        prop_assert!(greedy.objective <= start_cost);
    }
}

#[test]
fn latency_heavy_links_favour_merged_boundaries() {
    let g = ModelGraph::dense_chain("net", &[16, 16, 16, 16, 16])
        .unwrap()
        .default_costs(4);
    let c = ClusterSpec::uniform(2, 1e9, 1 << 30, 1.0, 1e9);
    let mut cfg = OptimizeConfig::new(c, 2, vec![4]);
    cfg.zmax = Some(4);
    let r = optimize_plan(&g, &cfg, &TotalCost).unwrap();
    assert!(r.plan.boundaries.iter().all(|b| *b == BoundaryComm::Direct) || r.plan.z() == 1);
}
