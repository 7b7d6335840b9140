use petgraph::algo::{is_cyclic_directed, toposort};
use petgraph::graph::DiGraph;
use pipemerge::cost::TaskCostTable;
use pipemerge::model::ModelGraph;
use pipemerge::partition::{build_plan, PartitionPlan, PlanOptions};
use pipemerge::schedule::{
    attach_updates, build_dependency_dag, build_forward_dag, schedule, schedule_plan, DependencyDag, Policy, Task,
    UpdateMode, UpdateScope,
};
use pipemerge::sim::{simulate, task_duration, MemoryPolicy};
use proptest::prelude::*;

fn chain(layers: usize) -> ModelGraph {
    ModelGraph::dense_chain("chain", &vec![8; layers + 1])
        .unwrap()
        .default_costs(4)
}

fn stage_plan(g: &ModelGraph) -> PartitionPlan {
    let spans: Vec<(usize, usize)> = (1..=g.len()).map(|l| (l, l)).collect();
    let groups: Vec<Vec<usize>> = (1..=g.len()).map(|d| vec![d]).collect();
    PartitionPlan::from_spans(g, &spans, &groups, PlanOptions::default()).unwrap()
}

fn petgraph_of(dag: &DependencyDag) -> DiGraph<Task, ()> {
    let mut pg = DiGraph::new();
    let nodes: Vec<_> = dag.tasks().iter().map(|t| pg.add_node(*t)).collect();
    for &(a, b) in dag.edges() {
        pg.add_edge(nodes[a], nodes[b], ());
    }
    pg
}

fn position(order: &[usize], dag: &DependencyDag, t: Task) -> usize {
    let id = dag.id(&t).unwrap();
    order.iter().position(|&x| x == id).unwrap()
}

#[test]
fn dags_are_acyclic_per_petgraph() {
    let g = chain(4);
    for z in 1..=4 {
        for m in 1..=4 {
            let plan = build_plan(&g, 2, z, PlanOptions::default()).unwrap();
            for dag in [build_dependency_dag(&plan, m), build_forward_dag(&plan, m)] {
                let pg = petgraph_of(&dag);
                assert!(!is_cyclic_directed(&pg));
                assert!(toposort(&pg, None).is_ok());
                assert_eq!(dag.topological_order().unwrap().len(), dag.len());
            }
        }
    }
}

#[test]
fn schedules_respect_every_edge() {
    let g = chain(4);
    let plan = build_plan(&g, 2, 3, PlanOptions::default()).unwrap();
    for policy in [Policy::Sequential, Policy::Pipelined] {
        let s = schedule_plan(&plan, 4, policy);
        s.verify().unwrap();
        let pos: Vec<usize> = {
            let mut p = vec![usize::MAX; s.dag.len()];
            for (i, &id) in s.order.iter().enumerate() {
                p[id] = i;
            }
            p
        };
        for &(a, b) in s.dag.edges() {
            assert!(pos[a] < pos[b], "{} before {}", s.dag.task(a), s.dag.task(b));
        }
    }
}

#[test]
fn fill_drain_makespan_is_exact() {
    for (z, m, t) in [(2, 3, 1.5), (4, 4, 1.0), (3, 6, 0.25), (5, 2, 2.0)] {
        let g = chain(z);
        let plan = stage_plan(&g);
        let table = TaskCostTable::from_parts(vec![vec![t; m]; z], vec![vec![0.0; m]; z], vec![vec![0.0; m]; z - 1]);
        let s = schedule(
            &build_forward_dag(&plan, m),
            Policy::Pipelined,
            &|task| task_duration(&table, task).unwrap(),
            false,
        );
        let r = simulate(&s, &table, MemoryPolicy::Proposed, &g, &plan).unwrap();
        assert_eq!(r.makespan_s, (z + m - 1) as f64 * t, "Z={z} m={m}");
    }
}

#[test]
fn early_backward_precedes_third_forward() {
    for z in 1..=4 {
        let plan = stage_plan(&chain(z));
        for m in 3..=5 {
            let s = schedule_plan(&plan, m, Policy::Pipelined);
            for i in 1..=z {
                let b = position(&s.order, &s.dag, Task::Backward { module: i, mb: 1 });
                let f = position(&s.order, &s.dag, Task::Forward { module: i, mb: 3 });
                assert!(b < f, "Z={z} m={m} module {i}");
            }
        }
    }
}

#[test]
fn update_placement() {
    let g = chain(3);
    let plan = stage_plan(&g);
    let s = schedule_plan(&plan, 3, Policy::Pipelined);
    let sync = attach_updates(&s, UpdateMode::SyncBarrier);
    let u = sync.dag.id(&Task::Update(UpdateScope::All)).unwrap();
    assert_eq!(*sync.order.last().unwrap(), u);
    for list in sync.device_lists.values() {
        assert_eq!(*list.last().unwrap(), u);
    }

    let asy = attach_updates(&s, UpdateMode::AsyncPerModule);
    for i in 1..=3 {
        let u = position(&asy.order, &asy.dag, Task::Update(UpdateScope::Module(i)));
        let b = position(&asy.order, &asy.dag, Task::Backward { module: i, mb: 3 });
        assert_eq!(u, b + 1);
    }
}

fn random_table(z: usize, m: usize, seed: &[f64]) -> TaskCostTable {
    let mut k = 0;
    let mut next = || {
        k += 1;
        seed[k % seed.len()]
    };
    let tf = (0..z).map(|_| (0..m).map(|_| next()).collect()).collect();
    let tb = (0..z).map(|_| (0..m).map(|_| next()).collect()).collect();
    let tc = (0..z - 1).map(|_| (0..m).map(|_| next() * 0.5).collect()).collect();
    TaskCostTable::from_parts(tf, tb, tc)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pipelined_never_slower_than_sequential(
        z in 1usize..=4,
        m in 1usize..=5,
        costs in prop::collection::vec(0.01f64..5.0, 1..40),
    ) {
        let g = chain(z);
        let plan = stage_plan(&g);
        let t = random_table(z, m, &costs);
        let price = |task: &Task| task_duration(&t, task).unwrap();
        let dag = build_dependency_dag(&plan, m);
        let seq = simulate(&schedule(&dag, Policy::Sequential, &price, false), &t, MemoryPolicy::Proposed, &g, &plan).unwrap();
        let pipe = simulate(&schedule(&dag, Policy::Pipelined, &price, false), &t, MemoryPolicy::Proposed, &g, &plan).unwrap();
        prop_assert!(pipe.makespan_s <= seq.makespan_s * (1.0 + 1e-12));
    }

    #[test]
    fn topological_order_matches_petgraph_validity(n in 1usize..=3, z in 1usize..=4, m in 1usize..=4) {
        let g = chain(4);
        let plan = build_plan(&g, n, z, PlanOptions::default()).unwrap();
        let dag = build_dependency_dag(&plan, m);
        let ours = dag.topological_order().unwrap();
        let pg = petgraph_of(&dag);
        let theirs = toposort(&pg, None).unwrap();
        prop_assert_eq!(ours.len(), theirs.len());
        let mut pos = vec![0; ours.len()];
        for (i, &id) in ours.iter().enumerate() {
            pos[id] = i;
        }
        for &(a, b) in dag.edges() {
            prop_assert!(pos[a] < pos[b]);
        }
    }
}
