//! Micro-batched forward/backward task graphs and their schedules.
//!
//! A batch is cut into `m` micro-batches. `F(i,j)` and `B(i,j)` are the forward
//! and backward passes of sub-module `i` on micro-batch `j`; `C` tasks move
//! activations (forward) or error signals (backward) across `concat`
//! boundaries; `U` tasks apply the accumulated gradients.
//!
//! Two policies turn the graph into per-device task lists: `sequential` runs
//! one task at a time in textbook order, `pipelined` is a work-conserving list
//! schedule that lets different sub-modules work on different micro-batches at
//! the same time.

use crate::partition::PartitionPlan;
use serde::Serialize;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UpdateScope {
    Module(usize),
    /// One synchronous update of every sub-module.
    All,
}

/// A schedulable unit of work. Module, boundary and micro-batch indices are
/// 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Forward { module: usize, mb: usize },
    Backward { module: usize, mb: usize },
    Comm { boundary: usize, mb: usize, dir: Direction },
    Update(UpdateScope),
}

impl Task {
    pub fn kind_char(&self) -> char {
        match self {
            Task::Forward { .. } => 'F',
            Task::Backward { .. } => 'B',
            Task::Comm { .. } => 'C',
            Task::Update(_) => 'U',
        }
    }

    pub fn microbatch(&self) -> Option<usize> {
        match *self {
            Task::Forward { mb, .. } | Task::Backward { mb, .. } | Task::Comm { mb, .. } => Some(mb),
            Task::Update(_) => None,
        }
    }

    pub fn is_update(&self) -> bool {
        matches!(self, Task::Update(_))
    }

    // ready-queue priority: smaller micro-batch, then backward work before
    // forward work, then smaller module (comm sits between its modules)
    fn priority(&self) -> (usize, u8, usize) {
        match *self {
            Task::Backward { module, mb } => (mb, 0, 2 * module),
            Task::Comm {
                boundary,
                mb,
                dir: Direction::Backward,
            } => (mb, 0, 2 * boundary + 1),
            Task::Forward { module, mb } => (mb, 1, 2 * module),
            Task::Comm {
                boundary,
                mb,
                dir: Direction::Forward,
            } => (mb, 1, 2 * boundary + 1),
            Task::Update(UpdateScope::Module(i)) => (usize::MAX, 2, i),
            Task::Update(UpdateScope::All) => (usize::MAX, 2, usize::MAX),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Forward { module, mb } => write!(f, "F({module},{mb})"),
            Task::Backward { module, mb } => write!(f, "B({module},{mb})"),
            Task::Comm {
                boundary,
                mb,
                dir: Direction::Forward,
            } => write!(f, "Cf({boundary},{mb})"),
            Task::Comm {
                boundary,
                mb,
                dir: Direction::Backward,
            } => write!(f, "Cb({boundary},{mb})"),
            Task::Update(UpdateScope::Module(i)) => write!(f, "U({i})"),
            Task::Update(UpdateScope::All) => write!(f, "U(*)"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("micro-batch smaller than one sample ({m} micro-batches for batch {b})")]
    MicrobatchTooSmall { b: usize, m: usize },
    #[error("batch size and micro-batch count must be at least 1")]
    Empty,
    #[error("dependency graph has a cycle through {0}")]
    Cycle(Task),
}

/// Splits a batch of `b` samples into `m` micro-batches whose sizes differ by
/// at most one, larger ones first.
pub fn split_microbatches(b: usize, m: usize) -> Result<Vec<usize>, ScheduleError> {
    if b == 0 || m == 0 {
        return Err(ScheduleError::Empty);
    }
    if m > b {
        return Err(ScheduleError::MicrobatchTooSmall { b, m });
    }
    let (base, extra) = (b / m, b % m);
    Ok((0..m).map(|k| base + usize::from(k < extra)).collect())
}

/// Tasks, the devices each one runs on, and precedence edges.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyDag {
    nodes: Vec<Task>,
    devices: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    index: HashMap<Task, usize>,
    modules: usize,
    microbatches: usize,
}

impl DependencyDag {
    fn empty(modules: usize, microbatches: usize) -> Self {
        Self {
            nodes: Vec::new(),
            devices: Vec::new(),
            edges: Vec::new(),
            preds: Vec::new(),
            succs: Vec::new(),
            index: HashMap::new(),
            modules,
            microbatches,
        }
    }

    fn add_node(&mut self, task: Task, devices: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(task);
        self.devices.push(devices);
        self.preds.push(Vec::new());
        self.succs.push(Vec::new());
        self.index.insert(task, id);
        id
    }

    fn add_edge(&mut self, from: usize, to: usize) {
        if !self.succs[from].contains(&to) {
            self.edges.push((from, to));
            self.succs[from].push(to);
            self.preds[to].push(from);
        }
    }

    fn link(&mut self, from: Task, to: Task) {
        if let (Some(a), Some(b)) = (self.id(&from), self.id(&to)) {
            self.add_edge(a, b);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn modules(&self) -> usize {
        self.modules
    }

    pub fn microbatches(&self) -> usize {
        self.microbatches
    }

    pub fn tasks(&self) -> &[Task] {
        &self.nodes
    }

    pub fn task(&self, id: usize) -> Task {
        self.nodes[id]
    }

    pub fn id(&self, task: &Task) -> Option<usize> {
        self.index.get(task).copied()
    }

    pub fn contains(&self, task: &Task) -> bool {
        self.index.contains_key(task)
    }

    /// Devices a task runs on.
    pub fn devices(&self, id: usize) -> &[usize] {
        &self.devices[id]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn predecessors(&self, id: usize) -> &[usize] {
        &self.preds[id]
    }

    pub fn successors(&self, id: usize) -> &[usize] {
        &self.succs[id]
    }

    pub fn has_edge(&self, from: &Task, to: &Task) -> bool {
        match (self.id(from), self.id(to)) {
            (Some(a), Some(b)) => self.succs[a].contains(&b),
            _ => false,
        }
    }

    /// Kahn's algorithm, smallest node id first among ready nodes.
    pub fn topological_order(&self) -> Result<Vec<usize>, ScheduleError> {
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &s in &self.succs[id] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        match (0..self.len()).find(|&i| indeg[i] > 0) {
            Some(stuck) => Err(ScheduleError::Cycle(self.nodes[stuck])),
            None => Ok(order),
        }
    }

    /// Same graph without its update tasks. Update tasks are always the last
    /// nodes, so the remaining ids are unchanged.
    fn without_updates(&self) -> DependencyDag {
        let keep = self.nodes.iter().take_while(|t| !t.is_update()).count();
        let mut out = DependencyDag::empty(self.modules, self.microbatches);
        for id in 0..keep {
            out.add_node(self.nodes[id], self.devices[id].clone());
        }
        for &(a, b) in &self.edges {
            if a < keep && b < keep {
                out.add_edge(a, b);
            }
        }
        out
    }
}

/// Full forward/backward/update graph of one batch.
pub fn build_dependency_dag(plan: &PartitionPlan, m: usize) -> DependencyDag {
    build_dag(plan, m, true)
}

/// Forward passes and forward transfers only.
pub fn build_forward_dag(plan: &PartitionPlan, m: usize) -> DependencyDag {
    build_dag(plan, m, false)
}

fn build_dag(plan: &PartitionPlan, m: usize, backward: bool) -> DependencyDag {
    let z = plan.z();
    let mut dag = DependencyDag::empty(z, m);
    let module_devices = |i: usize| plan.submodules[i - 1].devices.clone();
    let boundary_devices = |k: usize| -> Vec<usize> {
        let set: BTreeSet<usize> = plan.submodules[k - 1]
            .devices
            .iter()
            .chain(&plan.submodules[k].devices)
            .copied()
            .collect();
        set.into_iter().collect()
    };
    let concat = |k: usize| plan.boundary_transfers(k);

    for mb in 1..=m {
        for module in 1..=z {
            dag.add_node(Task::Forward { module, mb }, module_devices(module));
            if module < z && concat(module) {
                let dir = Direction::Forward;
                dag.add_node(
                    Task::Comm {
                        boundary: module,
                        mb,
                        dir,
                    },
                    boundary_devices(module),
                );
            }
        }
        if backward {
            for module in (1..=z).rev() {
                dag.add_node(Task::Backward { module, mb }, module_devices(module));
                if module > 1 && concat(module - 1) {
                    let dir = Direction::Backward;
                    dag.add_node(
                        Task::Comm {
                            boundary: module - 1,
                            mb,
                            dir,
                        },
                        boundary_devices(module - 1),
                    );
                }
            }
        }
    }
    if backward {
        for module in 1..=z {
            dag.add_node(Task::Update(UpdateScope::Module(module)), module_devices(module));
        }
    }

    for mb in 1..=m {
        for module in 1..z {
            let (from, to) = (Task::Forward { module, mb }, Task::Forward { module: module + 1, mb });
            if concat(module) {
                let c = Task::Comm {
                    boundary: module,
                    mb,
                    dir: Direction::Forward,
                };
                dag.link(from, c);
                dag.link(c, to);
            } else {
                dag.link(from, to);
            }
        }
        if backward {
            dag.link(Task::Forward { module: z, mb }, Task::Backward { module: z, mb });
            for module in (2..=z).rev() {
                let (from, to) = (Task::Backward { module, mb }, Task::Backward { module: module - 1, mb });
                if concat(module - 1) {
                    let c = Task::Comm {
                        boundary: module - 1,
                        mb,
                        dir: Direction::Backward,
                    };
                    dag.link(from, c);
                    dag.link(c, to);
                } else {
                    dag.link(from, to);
                }
            }
        }
        for module in 1..=z {
            dag.link(Task::Forward { module, mb }, Task::Forward { module, mb: mb + 1 });
            if backward {
                dag.link(Task::Backward { module, mb }, Task::Backward { module, mb: mb + 1 });
                // at most two micro-batches in flight per sub-module
                dag.link(Task::Backward { module, mb }, Task::Forward { module, mb: mb + 2 });
                dag.link(Task::Backward { module, mb }, Task::Update(UpdateScope::Module(module)));
            }
        }
    }
    dag
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Sequential,
    Pipelined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One update after every backward pass of the batch.
    SyncBarrier,
    /// Each sub-module updates right after its last backward pass.
    AsyncPerModule,
}

/// A resource a task holds while it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    Device(usize),
    Link,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub policy: Policy,
    /// Transfers hold only the link, not the devices on either side.
    pub overlap_comm: bool,
    pub dag: DependencyDag,
    /// Scheduled task ids in dispatch order.
    pub order: Vec<usize>,
    /// Task ids in execution order, per device.
    pub device_lists: BTreeMap<usize, Vec<usize>>,
    pub updates: Option<UpdateMode>,
}

impl Schedule {
    /// Resources task `id` occupies while running.
    pub fn resources(&self, id: usize) -> Vec<Resource> {
        resources_of(&self.dag, id, self.overlap_comm)
    }

    /// Checks that every scheduled task is listed once on each of its devices
    /// and that dispatch and device orders respect every edge.
    pub fn verify(&self) -> Result<(), String> {
        let mut pos = vec![None; self.dag.len()];
        for (p, &id) in self.order.iter().enumerate() {
            if pos[id].replace(p).is_some() {
                return Err(format!("{} dispatched twice", self.dag.task(id)));
            }
        }
        for &(a, b) in self.dag.edges() {
            match (pos[a], pos[b]) {
                (Some(pa), Some(pb)) if pa >= pb => {
                    return Err(format!("{} dispatched before {}", self.dag.task(b), self.dag.task(a)))
                }
                (None, Some(_)) => return Err(format!("{} scheduled without {}", self.dag.task(b), self.dag.task(a))),
                _ => {}
            }
        }
        let mut expected: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &id in &self.order {
            for &d in self.dag.devices(id) {
                expected.entry(d).or_default().push(id);
            }
        }
        if expected != self.device_lists {
            return Err("device lists disagree with dispatch order".to_string());
        }
        Ok(())
    }

    /// Per-device task names, for export.
    pub fn to_document(&self) -> ScheduleDocument {
        ScheduleDocument {
            policy: self.policy,
            updates: self.updates,
            overlap_comm: self.overlap_comm,
            order: self.order.iter().map(|&id| self.dag.task(id).to_string()).collect(),
            devices: self
                .device_lists
                .iter()
                .map(|(&device, ids)| DeviceTasks {
                    device,
                    tasks: ids.iter().map(|&id| self.dag.task(id).to_string()).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleDocument {
    pub policy: Policy,
    pub updates: Option<UpdateMode>,
    pub overlap_comm: bool,
    pub order: Vec<String>,
    pub devices: Vec<DeviceTasks>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceTasks {
    pub device: usize,
    pub tasks: Vec<String>,
}

fn resources_of(dag: &DependencyDag, id: usize, overlap_comm: bool) -> Vec<Resource> {
    let is_comm = matches!(dag.task(id), Task::Comm { .. });
    let mut out = Vec::new();
    if !(is_comm && overlap_comm) {
        out.extend(dag.devices(id).iter().map(|&d| Resource::Device(d)));
    }
    if is_comm {
        out.push(Resource::Link);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Finish(f64, usize);

impl Eq for Finish {}

impl Ord for Finish {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, dispatch sequence)
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Finish {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Schedules the forward, backward and transfer tasks of `dag`. Update tasks
/// are left detached; see [`attach_updates`].
///
/// `duration` prices tasks for the pipelined list schedule; the sequential
/// order does not depend on it.
pub fn schedule(dag: &DependencyDag, policy: Policy, duration: &dyn Fn(&Task) -> f64, overlap_comm: bool) -> Schedule {
    let dag = dag.without_updates();
    let order = match policy {
        Policy::Sequential => sequential_order(&dag),
        Policy::Pipelined => list_schedule(&dag, duration, overlap_comm),
    };
    let mut device_lists: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &id in &order {
        for &d in dag.devices(id) {
            device_lists.entry(d).or_default().push(id);
        }
    }
    Schedule {
        policy,
        overlap_comm,
        dag,
        order,
        device_lists,
        updates: None,
    }
}

/// [`schedule`] over a freshly built graph with unit task durations.
pub fn schedule_plan(plan: &PartitionPlan, m: usize, policy: Policy) -> Schedule {
    schedule(&build_dependency_dag(plan, m), policy, &|_| 1.0, false)
}

fn sequential_order(dag: &DependencyDag) -> Vec<usize> {
    let (z, m) = (dag.modules(), dag.microbatches());
    let mut order = Vec::with_capacity(dag.len());
    let mut push = |t: Task| {
        if let Some(id) = dag.id(&t) {
            order.push(id);
        }
    };
    for mb in 1..=m {
        for module in 1..=z {
            push(Task::Forward { module, mb });
            push(Task::Comm {
                boundary: module,
                mb,
                dir: Direction::Forward,
            });
        }
        for module in (1..=z).rev() {
            push(Task::Backward { module, mb });
            if module > 1 {
                push(Task::Comm {
                    boundary: module - 1,
                    mb,
                    dir: Direction::Backward,
                });
            }
        }
    }
    order
}

fn list_schedule(dag: &DependencyDag, duration: &dyn Fn(&Task) -> f64, overlap_comm: bool) -> Vec<usize> {
    let n = dag.len();
    let resources: Vec<Vec<Resource>> = (0..n).map(|id| resources_of(dag, id, overlap_comm)).collect();
    let mut indeg: Vec<usize> = (0..n).map(|id| dag.predecessors(id).len()).collect();
    let key = |id: usize| (dag.task(id).priority(), id);
    let mut ready: BTreeSet<((usize, u8, usize), usize)> = (0..n).filter(|&id| indeg[id] == 0).map(key).collect();
    let mut busy: BTreeSet<Resource> = BTreeSet::new();
    let mut running: BinaryHeap<Finish> = BinaryHeap::new();
    let mut order = Vec::with_capacity(n);
    let mut now = 0.0f64;
    let release = |id: usize, indeg: &mut Vec<usize>, ready: &mut BTreeSet<_>| {
        for &s in dag.successors(id) {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert(key(s));
            }
        }
    };

    loop {
        // a zero-length task completes on dispatch; rescan so its
        // successors compete with everything already ready
        'dispatch: loop {
            let startable: Vec<_> = ready.iter().copied().collect();
            for entry in startable {
                let id = entry.1;
                if resources[id].iter().any(|r| busy.contains(r)) {
                    continue;
                }
                ready.remove(&entry);
                let d = duration(&dag.task(id));
                order.push(id);
                if d > 0.0 {
                    busy.extend(resources[id].iter().copied());
                    running.push(Finish(now + d, order.len() - 1));
                } else {
                    release(id, &mut indeg, &mut ready);
                    continue 'dispatch;
                }
            }
            break;
        }
        let Some(first) = running.pop() else { break };
        now = first.0;
        let mut done = vec![first];
        while running.peek().is_some_and(|f| f.0 == now) {
            done.push(running.pop().expect("peeked"));
        }
        for Finish(_, seq) in done {
            let id = order[seq];
            for r in &resources[id] {
                busy.remove(r);
            }
            release(id, &mut indeg, &mut ready);
        }
    }
    debug_assert_eq!(order.len(), n, "list schedule left tasks unscheduled");
    order
}

/// Places update tasks into a schedule.
///
/// `SyncBarrier` adds a single global update after every backward pass.
/// `AsyncPerModule` runs `U(i)` on sub-module `i`'s devices right after its
/// last backward pass, without a barrier.
pub fn attach_updates(s: &Schedule, mode: UpdateMode) -> Schedule {
    let mut dag = s.dag.without_updates();
    let mut order = s.order.clone();
    let mut device_lists = s.device_lists.clone();
    let backward: Vec<usize> = (0..dag.len())
        .filter(|&id| matches!(dag.task(id), Task::Backward { .. }))
        .collect();

    match mode {
        UpdateMode::SyncBarrier => {
            let all: Vec<usize> = device_lists.keys().copied().collect();
            let u = dag.add_node(Task::Update(UpdateScope::All), all.clone());
            for &b in &backward {
                dag.add_edge(b, u);
            }
            order.push(u);
            for d in all {
                device_lists.entry(d).or_default().push(u);
            }
        }
        UpdateMode::AsyncPerModule => {
            for module in 1..=dag.modules() {
                let module_bs: Vec<usize> = backward
                    .iter()
                    .copied()
                    .filter(|&id| matches!(dag.task(id), Task::Backward { module: i, .. } if i == module))
                    .collect();
                let Some(&any_b) = module_bs.first() else { continue };
                let devices = dag.devices(any_b).to_vec();
                let u = dag.add_node(Task::Update(UpdateScope::Module(module)), devices.clone());
                for &b in &module_bs {
                    dag.add_edge(b, u);
                }
                let last = |list: &[usize]| list.iter().rposition(|id| module_bs.contains(id));
                let at = last(&order).expect("backward tasks are scheduled");
                order.insert(at + 1, u);
                for d in devices {
                    let list = device_lists.entry(d).or_default();
                    let at = last(list).expect("backward task on its device");
                    list.insert(at + 1, u);
                }
            }
        }
    }
    Schedule {
        policy: s.policy,
        overlap_comm: s.overlap_comm,
        dag,
        order,
        device_lists,
        updates: Some(mode),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelGraph;
    use crate::partition::{build_plan, PlanOptions};

    fn plan(layers: usize, n: usize, z: usize) -> PartitionPlan {
        let g = ModelGraph::dense_chain("s", &vec![6; layers + 1])
            .unwrap()
            .default_costs(4);
        build_plan(&g, n, z, PlanOptions::default()).unwrap()
    }

    fn stage_plan(z: usize) -> PartitionPlan {
        let g = ModelGraph::dense_chain("s", &vec![6; z + 1]).unwrap().default_costs(4);
        let spans: Vec<_> = (1..=z).map(|i| (i, i)).collect();
        let groups: Vec<_> = (1..=z).map(|i| vec![i]).collect();
        PartitionPlan::from_spans(&g, &spans, &groups, PlanOptions::default()).unwrap()
    }

    fn names(s: &Schedule, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| s.dag.task(id).to_string()).collect()
    }

    #[test]
    fn microbatch_split() {
        assert_eq!(split_microbatches(6, 3).unwrap(), vec![2, 2, 2]);
        assert_eq!(split_microbatches(7, 2).unwrap(), vec![4, 3]);
        assert!(matches!(
            split_microbatches(2, 3),
            Err(ScheduleError::MicrobatchTooSmall { .. })
        ));
        assert_eq!(split_microbatches(0, 1), Err(ScheduleError::Empty));
    }

    #[test]
    fn minimal_chain() {
        let dag = build_dependency_dag(&plan(1, 1, 1), 1);
        let tasks: Vec<String> = dag.tasks().iter().map(ToString::to_string).collect();
        assert_eq!(tasks, vec!["F(1,1)", "B(1,1)", "U(1)"]);
        assert_eq!(dag.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn merged_boundary_has_no_transfers() {
        let p = plan(2, 2, 2).merge_submodules(&[1, 2]).unwrap();
        let dag = build_dependency_dag(&p, 1);
        assert!(dag.tasks().iter().all(|t| !matches!(t, Task::Comm { .. })));
        let f = |module| Task::Forward { module, mb: 1 };
        let b = |module| Task::Backward { module, mb: 1 };
        assert!(dag.has_edge(&f(1), &f(2)));
        assert!(dag.has_edge(&f(2), &b(2)));
        assert!(dag.has_edge(&b(2), &b(1)));
    }

    #[test]
    fn concat_boundary_routes_through_transfers() {
        let dag = build_dependency_dag(&plan(2, 2, 2), 1);
        let cf = Task::Comm {
            boundary: 1,
            mb: 1,
            dir: Direction::Forward,
        };
        let cb = Task::Comm {
            boundary: 1,
            mb: 1,
            dir: Direction::Backward,
        };
        assert!(dag.has_edge(&Task::Forward { module: 1, mb: 1 }, &cf));
        assert!(dag.has_edge(&cf, &Task::Forward { module: 2, mb: 1 }));
        assert!(dag.has_edge(&Task::Backward { module: 2, mb: 1 }, &cb));
        assert!(dag.has_edge(&cb, &Task::Backward { module: 1, mb: 1 }));
        assert_eq!(dag.devices(dag.id(&cf).unwrap()), &[1, 2]);
    }

    #[test]
    fn two_by_two_edges() {
        let dag = build_dependency_dag(&plan(2, 1, 2), 2);
        assert!(dag.has_edge(&Task::Forward { module: 1, mb: 1 }, &Task::Forward { module: 1, mb: 2 }));
        assert!(dag.has_edge(
            &Task::Backward { module: 1, mb: 1 },
            &Task::Backward { module: 1, mb: 2 }
        ));
        assert!(dag.topological_order().is_ok());
    }

    #[test]
    fn updates_wait_for_every_backward() {
        let dag = build_dependency_dag(&plan(3, 1, 3), 4);
        let u = Task::Update(UpdateScope::Module(2));
        for mb in 1..=4 {
            assert!(dag.has_edge(&Task::Backward { module: 2, mb }, &u));
        }
    }

    #[test]
    fn single_microbatch_policies_agree() {
        let p = plan(2, 2, 2);
        let seq = schedule_plan(&p, 1, Policy::Sequential);
        let pipe = schedule_plan(&p, 1, Policy::Pipelined);
        assert_eq!(seq.order, pipe.order);
        assert_eq!(seq.device_lists, pipe.device_lists);
    }

    #[test]
    fn sequential_order_is_textbook() {
        let p = plan(2, 1, 2).merge_submodules(&[1, 2]).unwrap();
        let s = schedule_plan(&p, 2, Policy::Sequential);
        assert_eq!(
            names(&s, &s.order),
            vec!["F(1,1)", "F(2,1)", "B(2,1)", "B(1,1)", "F(1,2)", "F(2,2)", "B(2,2)", "B(1,2)"]
        );
        s.verify().unwrap();
    }

    #[test]
    fn stage_pipeline_overlaps_modules() {
        let s = schedule(
            &build_dependency_dag(&stage_plan(2), 2),
            Policy::Pipelined,
            &|_| 1.0,
            false,
        );
        s.verify().unwrap();
        // F(2,1) and F(1,2) are dispatched back to back, one per device
        let seq = names(&s, &s.order);
        let f21 = seq.iter().position(|t| t == "F(2,1)").unwrap();
        let f12 = seq.iter().position(|t| t == "F(1,2)").unwrap();
        assert_eq!(f21.abs_diff(f12), 1);
    }

    #[test]
    fn backward_then_forward_rule() {
        for z in 1..=4 {
            for m in 3..=6 {
                let s = schedule(
                    &build_dependency_dag(&stage_plan(z), m),
                    Policy::Pipelined,
                    &|_| 1.0,
                    false,
                );
                for list in s.device_lists.values() {
                    let names = names(&s, list);
                    for i in 1..=z {
                        let b = names.iter().position(|t| *t == format!("B({i},1)"));
                        let f = names.iter().position(|t| *t == format!("F({i},3)"));
                        if let (Some(b), Some(f)) = (b, f) {
                            assert!(b < f, "z={z} m={m}: {names:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn async_updates_follow_last_backward() {
        let s = attach_updates(
            &schedule_plan(&stage_plan(3), 4, Policy::Pipelined),
            UpdateMode::AsyncPerModule,
        );
        s.verify().unwrap();
        let order = names(&s, &s.order);
        for i in 1..=3 {
            let b = order.iter().position(|t| *t == format!("B({i},4)")).unwrap();
            assert_eq!(order[b + 1], format!("U({i})"));
        }
        let u3 = order.iter().position(|t| t == "U(3)").unwrap();
        let b14 = order.iter().position(|t| t == "B(1,4)").unwrap();
        assert!(u3 < b14);
    }

    #[test]
    fn sync_update_is_last_everywhere() {
        let s = attach_updates(
            &schedule_plan(&plan(3, 2, 3), 3, Policy::Pipelined),
            UpdateMode::SyncBarrier,
        );
        s.verify().unwrap();
        assert_eq!(s.dag.task(*s.order.last().unwrap()), Task::Update(UpdateScope::All));
        for list in s.device_lists.values() {
            assert_eq!(s.dag.task(*list.last().unwrap()), Task::Update(UpdateScope::All));
        }
    }

    #[test]
    fn single_module_update_modes_agree() {
        let base = schedule_plan(&plan(2, 2, 1), 3, Policy::Pipelined);
        let sync = attach_updates(&base, UpdateMode::SyncBarrier);
        let asyn = attach_updates(&base, UpdateMode::AsyncPerModule);
        assert_eq!(names(&sync, &sync.order).len(), names(&asyn, &asyn.order).len());
        // same slots, only the update's scope differs
        let strip = |s: &Schedule| -> Vec<char> { s.order.iter().map(|&id| s.dag.task(id).kind_char()).collect() };
        assert_eq!(strip(&sync), strip(&asyn));
    }

    #[test]
    fn schedules_are_deterministic() {
        let p = plan(5, 3, 4);
        let a = schedule_plan(&p, 5, Policy::Pipelined);
        let b = schedule_plan(&p, 5, Policy::Pipelined);
        assert_eq!(a, b);
    }
}
