//! Training with one thread per (sub-module, device) pair, following a
//! partition plan and the pipelined schedule.
//!
//! Each worker owns the output rows of its shards. Inside a sub-module the
//! shard outputs are all-gathered so every worker sees the full activation,
//! and error signals are reduce-scattered back to shard rows. Across a
//! `concat` boundary the producer's lowest device gathers and broadcasts the
//! activation (and, backward, sums and scatters the error signal); across a
//! `direct` boundary shards go point to point. Sums always run over
//! contributing devices in ascending id order, so both boundary kinds give
//! bitwise-equal results and runs are reproducible.
//!
//! Gradients are accumulated over every micro-batch before an update.
//! `SyncBarrier` updates all workers together between two barriers;
//! `AsyncPerModule` lets each worker update as soon as its last backward
//! pass of the batch is done.

use super::matrix::Matrix;
use super::net::{
    activate, apply_derivative, batch_for, loss_sum, output_delta, predictions, sgd_update, Activation, Batch,
    Confusion, DenseLayer, HistoryEntry, LayerGrad, TinyNet, TrainConfig, VerifyError,
};
use crate::partition::{BoundaryComm, PartitionPlan};
use crate::schedule::{schedule_plan, split_microbatches, Policy, Task, UpdateMode, UpdateScope};
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedOptions {
    pub mode: UpdateMode,
    /// How long a worker waits for any one message before reporting a
    /// deadlock.
    pub timeout: Duration,
    /// Test hook: negate the last layer's weight-gradient shard on the last
    /// sub-module's lowest device before every update.
    pub inject_fault: bool,
    /// Test hook: never send forward activations across this boundary.
    pub drop_boundary: Option<usize>,
    pub trace: bool,
}

impl Default for PartitionedOptions {
    fn default() -> Self {
        Self {
            mode: UpdateMode::SyncBarrier,
            timeout: Duration::from_secs(30),
            inject_fault: false,
            drop_boundary: None,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracePhase {
    Start,
    End,
}

/// One worker event, in the order the coordinator received it. The order
/// respects causality: an event caused by a message is received after the
/// event that sent it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub iteration: usize,
    pub device: usize,
    pub task: Task,
    pub phase: TracePhase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedRun {
    pub net: TinyNet,
    pub history: Vec<HistoryEntry>,
    pub trace: Vec<TraceEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Tag {
    /// Shard of a layer's output, all-gathered inside a sub-module.
    Act {
        iter: usize,
        mb: usize,
        layer: usize,
    },
    /// Partial error signal for a layer's output rows.
    Grad {
        iter: usize,
        mb: usize,
        layer: usize,
    },
    GatherOut {
        iter: usize,
        mb: usize,
    },
    LossDelta {
        iter: usize,
        mb: usize,
    },
    GatherFwd {
        iter: usize,
        mb: usize,
        boundary: usize,
    },
    BoundaryFwd {
        iter: usize,
        mb: usize,
        boundary: usize,
    },
    GatherBwd {
        iter: usize,
        mb: usize,
        boundary: usize,
    },
    BoundaryBwd {
        iter: usize,
        mb: usize,
        boundary: usize,
    },
}

impl Tag {
    fn describe(&self) -> String {
        match *self {
            Tag::Act { iter, mb, layer } => format!("layer {layer} activations (iteration {iter}, micro-batch {mb})"),
            Tag::Grad { iter, mb, layer } => format!("layer {layer} error signal (iteration {iter}, micro-batch {mb})"),
            Tag::GatherOut { iter, mb } => format!("output shards (iteration {iter}, micro-batch {mb})"),
            Tag::LossDelta { iter, mb } => format!("loss gradient (iteration {iter}, micro-batch {mb})"),
            Tag::GatherFwd { iter, mb, boundary } | Tag::BoundaryFwd { iter, mb, boundary } => {
                format!("boundary {boundary} forward activations (iteration {iter}, micro-batch {mb})")
            }
            Tag::GatherBwd { iter, mb, boundary } | Tag::BoundaryBwd { iter, mb, boundary } => {
                format!("boundary {boundary} backward error signal (iteration {iter}, micro-batch {mb})")
            }
        }
    }
}

enum Msg {
    Data { tag: Tag, from: usize, payload: Matrix },
    Go,
    Abort,
}

type Key = (usize, usize);

struct FinalShard {
    layer: usize,
    range: Range<usize>,
    w: Matrix,
    bias: Vec<f64>,
}

enum Report {
    Loss {
        iter: usize,
        mb: usize,
        loss: f64,
        confusion: Confusion,
    },
    Ready {
        iter: usize,
    },
    Updated {
        iter: usize,
    },
    Trace(TraceEvent),
    Final {
        key: Key,
        shards: Vec<FinalShard>,
    },
    Failed {
        error: VerifyError,
    },
}

enum WorkerError {
    Aborted,
    Failed(VerifyError),
}

impl From<VerifyError> for WorkerError {
    fn from(e: VerifyError) -> Self {
        WorkerError::Failed(e)
    }
}

struct LocalLayer {
    id: usize,
    range: Range<usize>,
    fan_out: usize,
    w: Matrix,
    bias: Vec<f64>,
    act: Activation,
}

/// Per-layer ranges of every device in one sub-module.
#[derive(Clone)]
struct Layout {
    /// `ranges[layer]`: `(device, range)` ascending by device.
    ranges: BTreeMap<usize, Vec<(usize, Range<usize>)>>,
    replicated: BTreeMap<usize, bool>,
    devices: Vec<usize>,
    boundary_after: Option<BoundaryComm>,
}

impl Layout {
    fn of(plan: &PartitionPlan, module: usize) -> Self {
        let sub = &plan.submodules[module - 1];
        let mut ranges = BTreeMap::new();
        let mut replicated = BTreeMap::new();
        for l in sub.layer_ids() {
            let mut r: Vec<(usize, Range<usize>)> =
                sub.layer_shards(l).map(|s| (s.device_id, s.range.clone())).collect();
            r.sort_by_key(|(d, _)| *d);
            let full = r.iter().map(|(_, x)| x.end).max().unwrap_or(0);
            replicated.insert(l, r.len() > 1 && r.iter().all(|(_, x)| *x == (0..full)));
            ranges.insert(l, r);
        }
        Self {
            ranges,
            replicated,
            devices: sub.devices.clone(),
            boundary_after: plan.boundaries.get(module - 1).copied(),
        }
    }

    fn root(&self) -> usize {
        self.devices[0]
    }

    fn range(&self, layer: usize, device: usize) -> Range<usize> {
        self.ranges[&layer]
            .iter()
            .find(|(d, _)| *d == device)
            .map(|(_, r)| r.clone())
            .expect("device holds a shard of every layer in its sub-module")
    }

    /// Devices whose shards are summed or assembled: all of them, or only
    /// the lowest for a replicated layer.
    fn contributors(&self, layer: usize) -> Vec<(usize, Range<usize>)> {
        let r = &self.ranges[&layer];
        if self.replicated[&layer] {
            r[..1].to_vec()
        } else {
            r.clone()
        }
    }
}

struct Worker<'a> {
    module: usize,
    device: usize,
    z: usize,
    total_layers: usize,
    layers: Vec<LocalLayer>,
    own: Layout,
    prev: Option<Layout>,
    next: Option<Layout>,
    tasks: Vec<Task>,
    data: &'a [Batch],
    cfg: TrainConfig,
    opts: PartitionedOptions,
    m: usize,
    inbox: Receiver<Msg>,
    outboxes: BTreeMap<Key, Sender<Msg>>,
    report: Sender<Report>,
    pending: HashMap<(Tag, usize), Matrix>,
    go: usize,
    tape: HashMap<usize, Vec<(Matrix, Matrix)>>,
    accum: Vec<Option<LayerGrad>>,
}

fn assemble(rows: usize, width: usize, parts: Vec<(Range<usize>, Matrix)>) -> Matrix {
    let mut full = Matrix::zeros(rows, width);
    for (range, part) in parts {
        full.put_cols(range.start, &part);
    }
    full
}

fn sum_in_order(parts: Vec<Matrix>) -> Matrix {
    let mut it = parts.into_iter();
    let mut total = it.next().expect("at least one contributor");
    for p in it {
        total.add_assign(&p);
    }
    total
}

impl<'a> Worker<'a> {
    fn key(&self) -> Key {
        (self.module, self.device)
    }

    fn send(&mut self, to: Key, tag: Tag, payload: Matrix) {
        if to == self.key() {
            self.pending.insert((tag, self.device), payload);
        } else if let Some(tx) = self.outboxes.get(&to) {
            // a closed inbox means the run is being torn down
            let _ = tx.send(Msg::Data {
                tag,
                from: self.device,
                payload,
            });
        }
    }

    fn pump(&mut self, deadline: Instant, waiting_for: impl Fn() -> String) -> Result<(), WorkerError> {
        let left = deadline.saturating_duration_since(Instant::now());
        match self.inbox.recv_timeout(left) {
            Ok(Msg::Data { tag, from, payload }) => {
                self.pending.insert((tag, from), payload);
                Ok(())
            }
            Ok(Msg::Go) => {
                self.go += 1;
                Ok(())
            }
            Ok(Msg::Abort) | Err(RecvTimeoutError::Disconnected) => Err(WorkerError::Aborted),
            Err(RecvTimeoutError::Timeout) => Err(WorkerError::Failed(VerifyError::Partitioned(format!(
                "deadlock: worker (sub-module {}, device {}) timed out waiting for {}",
                self.module,
                self.device,
                waiting_for()
            )))),
        }
    }

    fn recv(&mut self, tag: Tag, from: usize) -> Result<Matrix, WorkerError> {
        let deadline = Instant::now() + self.opts.timeout;
        loop {
            if let Some(m) = self.pending.remove(&(tag, from)) {
                return Ok(m);
            }
            self.pump(deadline, || format!("{} from device {from}", tag.describe()))?;
        }
    }

    fn barrier(&mut self, what: &str) -> Result<(), WorkerError> {
        let deadline = Instant::now() + self.opts.timeout;
        while self.go == 0 {
            self.pump(deadline, || what.to_string())?;
        }
        self.go -= 1;
        Ok(())
    }

    fn trace(&self, iteration: usize, task: Task, phase: TracePhase) {
        if self.opts.trace {
            let _ = self.report.send(Report::Trace(TraceEvent {
                iteration,
                device: self.device,
                task,
                phase,
            }));
        }
    }

    fn run(mut self) -> Result<(), WorkerError> {
        for t in 1..=self.cfg.iterations {
            let batch = batch_for(self.data, t);
            let sizes = split_microbatches(batch.len(), self.m).map_err(|e| VerifyError::Partitioned(e.to_string()))?;
            let mut offsets = vec![0];
            for s in &sizes {
                offsets.push(offsets.last().unwrap() + s);
            }
            for task in self.tasks.clone() {
                self.trace(t, task, TracePhase::Start);
                match task {
                    Task::Forward { mb, .. } => self.forward(t, mb, batch, offsets[mb - 1]..offsets[mb])?,
                    Task::Backward { mb, .. } => self.backward(t, mb)?,
                    _ => unreachable!("workers run only forward and backward tasks"),
                }
                self.trace(t, task, TracePhase::End);
            }
            self.update(t)?;
        }
        let shards = self
            .layers
            .iter()
            .map(|l| FinalShard {
                layer: l.id,
                range: l.range.clone(),
                w: l.w.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        let _ = self.report.send(Report::Final {
            key: self.key(),
            shards,
        });
        Ok(())
    }

    fn forward(&mut self, t: usize, mb: usize, batch: &Batch, rows: Range<usize>) -> Result<(), WorkerError> {
        let mut a = if self.module == 1 {
            batch.x.slice_rows(rows.clone())
        } else {
            self.receive_boundary_forward(t, mb)?
        };
        let mut tape = Vec::with_capacity(self.layers.len());
        for idx in 0..self.layers.len() {
            let layer = &self.layers[idx];
            let mut q = a.matmul_bt(&layer.w);
            q.add_row_vector(&layer.bias);
            let is_final = layer.id == self.total_layers;
            let out = if is_final { q.clone() } else { activate(layer.act, &q) };
            let (id, fan_out) = (layer.id, layer.fan_out);
            tape.push((a, q));
            if idx + 1 < self.layers.len() {
                a = self.all_gather(Tag::Act { iter: t, mb, layer: id }, id, fan_out, out)?;
            } else if !is_final {
                self.send_boundary_forward(t, mb, id, fan_out, out)?;
                a = Matrix::zeros(0, 0);
            } else {
                self.loss_stage(t, mb, batch, rows.clone(), out)?;
                a = Matrix::zeros(0, 0);
            }
        }
        self.tape.insert(mb, tape);
        Ok(())
    }

    fn all_gather(&mut self, tag: Tag, layer: usize, width: usize, shard: Matrix) -> Result<Matrix, WorkerError> {
        if self.own.replicated[&layer] {
            return Ok(shard);
        }
        let rows = shard.rows();
        for &peer in &self.own.devices.clone() {
            self.send((self.module, peer), tag, shard.clone());
        }
        let mut parts = Vec::new();
        for (d, range) in self.own.contributors(layer) {
            parts.push((range, self.recv(tag, d)?));
        }
        Ok(assemble(rows, width, parts))
    }

    fn is_contributor(&self, layer: usize) -> bool {
        !self.own.replicated[&layer] || self.device == self.own.root()
    }

    fn send_boundary_forward(
        &mut self,
        t: usize,
        mb: usize,
        layer: usize,
        width: usize,
        shard: Matrix,
    ) -> Result<(), WorkerError> {
        let k = self.module;
        if self.opts.drop_boundary == Some(k) || !self.is_contributor(layer) {
            return Ok(());
        }
        let next = self.next.clone().expect("a boundary has a consumer");
        match self.own.boundary_after.expect("boundary kind") {
            BoundaryComm::ConcatRepartition => {
                let root = self.own.root();
                let gather = Tag::GatherFwd {
                    iter: t,
                    mb,
                    boundary: k,
                };
                let rows = shard.rows();
                self.send((k, root), gather, shard);
                if self.device == root {
                    let mut parts = Vec::new();
                    for (d, range) in self.own.contributors(layer) {
                        parts.push((range, self.recv(gather, d)?));
                    }
                    let full = assemble(rows, width, parts);
                    for &d in &next.devices {
                        self.send(
                            (k + 1, d),
                            Tag::BoundaryFwd {
                                iter: t,
                                mb,
                                boundary: k,
                            },
                            full.clone(),
                        );
                    }
                }
            }
            BoundaryComm::Direct => {
                for &d in &next.devices {
                    self.send(
                        (k + 1, d),
                        Tag::BoundaryFwd {
                            iter: t,
                            mb,
                            boundary: k,
                        },
                        shard.clone(),
                    );
                }
            }
        }
        Ok(())
    }

    fn receive_boundary_forward(&mut self, t: usize, mb: usize) -> Result<Matrix, WorkerError> {
        let k = self.module - 1;
        let prev = self.prev.clone().expect("a boundary has a producer");
        let tag = Tag::BoundaryFwd {
            iter: t,
            mb,
            boundary: k,
        };
        match prev.boundary_after.expect("boundary kind") {
            BoundaryComm::ConcatRepartition => self.recv(tag, prev.root()),
            BoundaryComm::Direct => {
                let layer = *prev.ranges.keys().last().expect("producer has layers");
                let width = prev.ranges[&layer].iter().map(|(_, r)| r.end).max().unwrap_or(0);
                let mut parts = Vec::new();
                for (d, range) in prev.contributors(layer) {
                    parts.push((range, self.recv(tag, d)?));
                }
                let rows = parts.first().map_or(0, |(_, p)| p.rows());
                Ok(assemble(rows, width, parts))
            }
        }
    }

    fn loss_stage(
        &mut self,
        t: usize,
        mb: usize,
        batch: &Batch,
        rows: Range<usize>,
        q_shard: Matrix,
    ) -> Result<(), WorkerError> {
        let layer = self.layers.last().expect("sub-module has layers");
        let (id, width, act) = (layer.id, layer.fan_out, layer.act);
        let root = self.own.root();
        let gather = Tag::GatherOut { iter: t, mb };
        if self.is_contributor(id) {
            self.send((self.module, root), gather, q_shard);
        }
        if self.device != root {
            return Ok(());
        }
        let mut parts = Vec::new();
        for (d, range) in self.own.contributors(id) {
            parts.push((range, self.recv(gather, d)?));
        }
        let q = assemble(rows.len(), width, parts);
        let y = activate(act, &q);
        let labels = &batch.labels[rows];
        let loss = loss_sum(&y, labels, self.cfg.loss, batch.len())?;
        let confusion = Confusion::from_predictions(&predictions(&y), labels);
        let _ = self.report.send(Report::Loss {
            iter: t,
            mb,
            loss,
            confusion,
        });
        let delta = output_delta(act, &q, &y, labels, self.cfg.loss, batch.len())?;
        for (d, range) in self.own.ranges[&id].clone() {
            self.send(
                (self.module, d),
                Tag::LossDelta { iter: t, mb },
                delta.slice_cols(range),
            );
        }
        Ok(())
    }

    fn backward(&mut self, t: usize, mb: usize) -> Result<(), WorkerError> {
        let tape = self.tape.remove(&mb).expect("forward ran before backward");
        let last = self.layers.len() - 1;
        let mut delta = if self.module == self.z {
            self.recv(Tag::LossDelta { iter: t, mb }, self.own.root())?
        } else {
            let upstream = self.receive_boundary_backward(t, mb)?;
            apply_derivative(self.layers[last].act, &upstream, &tape[last].1)
        };
        for idx in (0..=last).rev() {
            let g = LayerGrad {
                w: delta.tmatmul(&tape[idx].0),
                bias: delta.col_sums(),
            };
            match self.accum[idx].as_mut() {
                None => self.accum[idx] = Some(g),
                Some(acc) => {
                    acc.w.add_assign(&g.w);
                    for (x, y) in acc.bias.iter_mut().zip(&g.bias) {
                        *x += y;
                    }
                }
            }
            if idx == 0 && self.module == 1 {
                break;
            }
            let id = self.layers[idx].id;
            let partial = self.is_contributor(id).then(|| delta.matmul(&self.layers[idx].w));
            if idx > 0 {
                let target = self.layers[idx - 1].id;
                let tag = Tag::Grad {
                    iter: t,
                    mb,
                    layer: target,
                };
                if let Some(p) = &partial {
                    for (d, range) in self.own.ranges[&target].clone() {
                        self.send((self.module, d), tag, p.slice_cols(range));
                    }
                }
                let mut parts = Vec::new();
                for (d, _) in self.own.contributors(id) {
                    parts.push(self.recv(tag, d)?);
                }
                delta = apply_derivative(self.layers[idx - 1].act, &sum_in_order(parts), &tape[idx - 1].1);
            } else {
                self.send_boundary_backward(t, mb, id, partial)?;
            }
        }
        Ok(())
    }

    fn send_boundary_backward(
        &mut self,
        t: usize,
        mb: usize,
        layer: usize,
        partial: Option<Matrix>,
    ) -> Result<(), WorkerError> {
        let k = self.module - 1;
        let prev = self.prev.clone().expect("a boundary has a consumer");
        let target = *prev.ranges.keys().last().expect("producer has layers");
        let tag = Tag::BoundaryBwd {
            iter: t,
            mb,
            boundary: k,
        };
        match prev.boundary_after.expect("boundary kind") {
            BoundaryComm::ConcatRepartition => {
                let root = self.own.root();
                let gather = Tag::GatherBwd {
                    iter: t,
                    mb,
                    boundary: k,
                };
                if let Some(p) = partial {
                    self.send((self.module, root), gather, p);
                }
                if self.device == root {
                    let mut parts = Vec::new();
                    for (d, _) in self.own.contributors(layer) {
                        parts.push(self.recv(gather, d)?);
                    }
                    let total = sum_in_order(parts);
                    for (d, range) in prev.ranges[&target].clone() {
                        self.send((k, d), tag, total.slice_cols(range));
                    }
                }
            }
            BoundaryComm::Direct => {
                if let Some(p) = partial {
                    for (d, range) in prev.ranges[&target].clone() {
                        self.send((k, d), tag, p.slice_cols(range));
                    }
                }
            }
        }
        Ok(())
    }

    fn receive_boundary_backward(&mut self, t: usize, mb: usize) -> Result<Matrix, WorkerError> {
        let k = self.module;
        let next = self.next.clone().expect("a boundary has a producer");
        let tag = Tag::BoundaryBwd {
            iter: t,
            mb,
            boundary: k,
        };
        match self.own.boundary_after.expect("boundary kind") {
            BoundaryComm::ConcatRepartition => self.recv(tag, next.root()),
            BoundaryComm::Direct => {
                let first = *next.ranges.keys().next().expect("consumer has layers");
                let mut parts = Vec::new();
                for (d, _) in next.contributors(first) {
                    parts.push(self.recv(tag, d)?);
                }
                Ok(sum_in_order(parts))
            }
        }
    }

    fn update(&mut self, t: usize) -> Result<(), WorkerError> {
        if self.opts.inject_fault && self.module == self.z && self.device == self.own.root() {
            if let Some(g) = self.accum.last_mut().and_then(Option::as_mut) {
                g.w = g.w.map(|x| -x);
            }
        }
        let finite = self
            .accum
            .iter()
            .flatten()
            .all(|g| g.w.is_finite() && g.bias.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(WorkerError::Failed(VerifyError::Diverged { iteration: t }));
        }
        let sync = self.opts.mode == UpdateMode::SyncBarrier;
        if sync {
            let _ = self.report.send(Report::Ready { iter: t });
            self.barrier("the update barrier")?;
        }
        let task = Task::Update(if sync {
            UpdateScope::All
        } else {
            UpdateScope::Module(self.module)
        });
        self.trace(t, task, TracePhase::Start);
        let alpha = self.cfg.rate(t);
        for (layer, g) in self.layers.iter_mut().zip(self.accum.iter_mut()) {
            if let Some(g) = g.take() {
                sgd_update(&mut layer.w, &mut layer.bias, &g, alpha);
            }
        }
        self.trace(t, task, TracePhase::End);
        if sync {
            let _ = self.report.send(Report::Updated { iter: t });
            self.barrier("the post-update barrier")?;
        }
        Ok(())
    }
}

/// Trains `net` with the plan's sub-modules and shards running as concurrent
/// workers, `m` micro-batches per batch.
pub fn train_partitioned(
    net: &TinyNet,
    data: &[Batch],
    cfg: &TrainConfig,
    plan: &PartitionPlan,
    m: usize,
    opts: &PartitionedOptions,
) -> Result<PartitionedRun, VerifyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(VerifyError::Empty);
    }
    let g = net
        .model_graph("tiny")
        .map_err(|e| VerifyError::Partitioned(format!("network has no layer graph: {e}")))?;
    plan.validate(&g, None)
        .map_err(|e| VerifyError::Partitioned(format!("plan does not match network: {e}")))?;
    for b in data {
        split_microbatches(b.len(), m).map_err(|e| VerifyError::Partitioned(e.to_string()))?;
        if b.x.cols() != net.layers[0].fan_in() {
            return Err(VerifyError::Shape("batch width differs from the network input".into()));
        }
    }

    let z = plan.z();
    let total_layers = net.layers.len();
    let layouts: Vec<Layout> = (1..=z).map(|i| Layout::of(plan, i)).collect();
    let schedule = schedule_plan(plan, m, Policy::Pipelined);
    let module_tasks = |i: usize| -> Vec<Task> {
        schedule
            .order
            .iter()
            .map(|&id| schedule.dag.task(id))
            .filter(|t| matches!(t, Task::Forward { module, .. } | Task::Backward { module, .. } if *module == i))
            .collect()
    };

    let mut inboxes = BTreeMap::new();
    let mut outboxes = BTreeMap::new();
    for sub in &plan.submodules {
        for &d in &sub.devices {
            let (tx, rx) = channel();
            outboxes.insert((sub.index, d), tx);
            inboxes.insert((sub.index, d), rx);
        }
    }
    let (report_tx, report_rx) = channel();
    let mut workers = Vec::new();
    for ((module, device), inbox) in inboxes {
        let sub = &plan.submodules[module - 1];
        let own = layouts[module - 1].clone();
        let layers = sub
            .layer_ids()
            .map(|id| {
                let full: &DenseLayer = &net.layers[id - 1];
                let range = own.range(id, device);
                let w = full.w.slice_rows(range.clone());
                LocalLayer {
                    id,
                    bias: full.bias[range.clone()].to_vec(),
                    range,
                    fan_out: full.fan_out(),
                    w,
                    act: full.act,
                }
            })
            .collect::<Vec<_>>();
        workers.push(Worker {
            module,
            device,
            z,
            total_layers,
            accum: (0..layers.len()).map(|_| None).collect(),
            layers,
            own,
            prev: (module > 1).then(|| layouts[module - 2].clone()),
            next: (module < z).then(|| layouts[module].clone()),
            tasks: module_tasks(module),
            data,
            cfg: *cfg,
            opts: opts.clone(),
            m,
            inbox,
            outboxes: outboxes.clone(),
            report: report_tx.clone(),
            pending: HashMap::new(),
            go: 0,
            tape: HashMap::new(),
        });
    }
    drop(report_tx);
    let worker_count = workers.len();

    std::thread::scope(|scope| {
        for w in workers {
            let report = w.report.clone();
            scope.spawn(move || {
                if let Err(WorkerError::Failed(error)) = w.run() {
                    let _ = report.send(Report::Failed { error });
                }
            });
        }
        coordinate(&report_rx, &outboxes, worker_count, net, cfg, opts)
    })
}

fn coordinate(
    reports: &Receiver<Report>,
    outboxes: &BTreeMap<Key, Sender<Msg>>,
    workers: usize,
    net: &TinyNet,
    cfg: &TrainConfig,
    opts: &PartitionedOptions,
) -> Result<PartitionedRun, VerifyError> {
    let broadcast = |msg: fn() -> Msg| {
        for tx in outboxes.values() {
            let _ = tx.send(msg());
        }
    };
    let mut losses: BTreeMap<(usize, usize), (f64, Confusion)> = BTreeMap::new();
    let mut ready: HashMap<usize, usize> = HashMap::new();
    let mut updated: HashMap<usize, usize> = HashMap::new();
    let mut finals = Vec::new();
    let mut trace = Vec::new();
    let mut failure: Option<VerifyError> = None;
    // generous: a worker reports every few messages while it makes progress
    let patience = opts.timeout + Duration::from_secs(5);

    while finals.len() < workers {
        let report = match reports.recv_timeout(patience) {
            Ok(r) => r,
            Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {
                failure.get_or_insert(VerifyError::Partitioned("workers stopped reporting".into()));
                broadcast(|| Msg::Abort);
                break;
            }
        };
        match report {
            Report::Loss {
                iter,
                mb,
                loss,
                confusion,
            } => {
                if !loss.is_finite() && failure.is_none() {
                    failure = Some(VerifyError::Diverged { iteration: iter });
                    broadcast(|| Msg::Abort);
                }
                losses.insert((iter, mb), (loss, confusion));
            }
            Report::Ready { iter } => {
                let c = ready.entry(iter).or_insert(0);
                *c += 1;
                if *c == workers {
                    broadcast(|| Msg::Go);
                }
            }
            Report::Updated { iter } => {
                let c = updated.entry(iter).or_insert(0);
                *c += 1;
                if *c == workers {
                    broadcast(|| Msg::Go);
                }
            }
            Report::Trace(e) => trace.push(e),
            Report::Final { key, shards } => finals.push((key, shards)),
            Report::Failed { error } => {
                if failure.is_none() {
                    failure = Some(error);
                    broadcast(|| Msg::Abort);
                }
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if finals.len() < workers {
        return Err(VerifyError::Partitioned("a worker exited without reporting".into()));
    }

    let mut out = net.clone();
    // ascending (module, device): the lowest device's copy of a replicated
    // layer is written last among equals, so write lowest last by iterating
    // in reverse
    finals.sort_by_key(|(k, _)| std::cmp::Reverse(*k));
    for (_, shards) in finals {
        for s in shards {
            let layer = &mut out.layers[s.layer - 1];
            for (r, row) in s.range.clone().enumerate() {
                for c in 0..layer.w.cols() {
                    layer.w.set(row, c, s.w.get(r, c));
                }
            }
            layer.bias[s.range.clone()].copy_from_slice(&s.bias);
        }
    }

    let mut history = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        let parts: Vec<&(f64, Confusion)> = losses.range((t, 0)..(t + 1, 0)).map(|(_, v)| v).collect();
        let mut it = parts.iter();
        let first = it
            .next()
            .ok_or_else(|| VerifyError::Partitioned(format!("no loss for iteration {t}")))?;
        let (mut loss, mut c) = **first;
        for (l, k) in it {
            loss += l;
            c.tp += k.tp;
            c.tn += k.tn;
            c.fp += k.fp;
            c.fn_ += k.fn_;
        }
        history.push(HistoryEntry {
            iteration: t,
            loss,
            acc: c.accuracy()?,
        });
    }
    Ok(PartitionedRun {
        net: out,
        history,
        trace,
    })
}
