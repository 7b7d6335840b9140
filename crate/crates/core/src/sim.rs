//! Discrete-event execution of schedules: makespan, utilization, memory and
//! speedup.
//!
//! Tasks are replayed in dispatch order. A task starts once its
//! prerequisites have finished and every resource it holds (its devices, and
//! the shared link for transfers) has finished the tasks dispatched on it
//! earlier.

use crate::cost::{task_costs, CostParams, TaskCostTable};
use crate::model::{ClusterSpec, ModelGraph};
use crate::optimize::{optimize_plan, OptimizeConfig, OptimizeError, OptimizerReport, PlanObjective, TotalCost};
use crate::partition::{build_plan, shard_share, PartitionPlan};
use crate::schedule::{
    attach_updates, build_dependency_dag, schedule, split_microbatches, Direction, Policy, Resource, Schedule,
    ScheduleError, Task, UpdateMode, UpdateScope,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Bytes per parameter when accounting for resident weights.
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("task {0} has no entry in the cost table")]
    Unpriced(Task),
    #[error("task {task} has invalid duration {seconds}")]
    BadDuration { task: Task, seconds: f64 },
    #[error("parallel time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("sweep needs at least one device count")]
    EmptySweep,
    #[error("device counts must be ascending and at least 1")]
    BadSweepOrder,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPolicy {
    /// A micro-batch's activations are freed when its backward pass ends.
    #[default]
    Proposed,
    /// Every micro-batch's activations stay until the sub-module's last
    /// backward pass of the batch.
    StashAll,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceReport {
    pub device: usize,
    pub busy_s: f64,
    pub utilization: f64,
    pub peak_mem_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub task: String,
    pub kind: char,
    pub start_s: f64,
    pub finish_s: f64,
    /// Devices the task occupies.
    pub devices: Vec<usize>,
    pub link: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub makespan_s: f64,
    pub devices: Vec<DeviceReport>,
    /// Seconds the link spends on transfers.
    pub comm_s: f64,
    pub tf_total_s: f64,
    pub tb_total_s: f64,
    pub timeline: Vec<TimelineEntry>,
}

impl SimReport {
    pub fn peak_mem_max(&self) -> f64 {
        self.devices.iter().map(|d| d.peak_mem_bytes).fold(0.0, f64::max)
    }

    pub fn util_min(&self) -> f64 {
        self.devices
            .iter()
            .map(|d| d.utilization)
            .reduce(f64::min)
            .unwrap_or(0.0)
    }

    pub fn util_mean(&self) -> f64 {
        if self.devices.is_empty() {
            0.0
        } else {
            self.devices.iter().map(|d| d.utilization).sum::<f64>() / self.devices.len() as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes to JSON")
    }
}

/// Seconds a task takes under a cost table. The loss exchange is charged to
/// the last sub-module's backward pass.
pub fn task_duration(t: &TaskCostTable, task: &Task) -> Result<f64, SimError> {
    let z = t.modules();
    let get = |rows: &[Vec<f64>], i: usize, j: usize| {
        rows.get(i.wrapping_sub(1))
            .and_then(|r| r.get(j.wrapping_sub(1)))
            .copied()
    };
    let found = match *task {
        Task::Forward { module, mb } => get(&t.tf, module, mb),
        Task::Backward { module, mb } => get(&t.tb, module, mb).map(|b| {
            if module == z {
                b + t.tloss.get(mb - 1).copied().unwrap_or(0.0)
            } else {
                b
            }
        }),
        Task::Comm { boundary, mb, .. } => get(&t.tcomm, boundary, mb),
        Task::Update(UpdateScope::Module(i)) => t.tu.get(i.wrapping_sub(1)).copied(),
        Task::Update(UpdateScope::All) => Some(t.tu_all),
    };
    match found {
        None => Err(SimError::Unpriced(*task)),
        Some(s) if !s.is_finite() || s < 0.0 => Err(SimError::BadDuration {
            task: *task,
            seconds: s,
        }),
        Some(s) => Ok(s),
    }
}

/// Per device, bytes of activations one task's micro-batch keeps alive and
/// bytes of parameters resident.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryModel {
    /// `act[(module, device)]`: activation bytes per sample.
    act: BTreeMap<(usize, usize), f64>,
    params: BTreeMap<usize, f64>,
    samples: Vec<u64>,
}

impl MemoryModel {
    pub fn new(g: &ModelGraph, plan: &PartitionPlan, samples: &[u64], bytes_per_param: u64) -> Self {
        let mut act = BTreeMap::new();
        let mut params: BTreeMap<usize, f64> = BTreeMap::new();
        for sub in &plan.submodules {
            for shard in &sub.shards {
                let Some(layer) = g.layer(shard.layer_id) else { continue };
                let share = shard_share(shard, layer, plan.is_replicated(g, layer.id));
                *act.entry((sub.index, shard.device_id)).or_insert(0.0) += layer.act_bytes as f64 * share;
                *params.entry(shard.device_id).or_insert(0.0) += (layer.param_count * bytes_per_param) as f64 * share;
            }
        }
        Self {
            act,
            params,
            samples: samples.to_vec(),
        }
    }

    fn activation(&self, module: usize, device: usize, mb: usize) -> f64 {
        let per_sample = self.act.get(&(module, device)).copied().unwrap_or(0.0);
        per_sample * self.samples.get(mb - 1).copied().unwrap_or(0) as f64
    }

    fn params(&self, device: usize) -> f64 {
        self.params.get(&device).copied().unwrap_or(0.0)
    }
}

/// Replays a schedule against a cost table.
pub fn simulate(
    s: &Schedule,
    t: &TaskCostTable,
    mem: MemoryPolicy,
    g: &ModelGraph,
    plan: &PartitionPlan,
) -> Result<SimReport, SimError> {
    let model = MemoryModel::new(g, plan, &t.samples, BYTES_PER_PARAM);
    simulate_with(s, t, mem, &model)
}

pub fn simulate_with(
    s: &Schedule,
    t: &TaskCostTable,
    mem: MemoryPolicy,
    model: &MemoryModel,
) -> Result<SimReport, SimError> {
    let dag = &s.dag;
    let mut start = vec![0.0f64; dag.len()];
    let mut finish = vec![0.0f64; dag.len()];
    let mut free_at: BTreeMap<Resource, f64> = BTreeMap::new();
    let mut busy: BTreeMap<usize, f64> = s.device_lists.keys().map(|&d| (d, 0.0)).collect();
    let (mut comm_s, mut tf_total, mut tb_total, mut makespan) = (0.0, 0.0, 0.0, 0.0f64);
    let mut timeline = Vec::with_capacity(s.order.len());

    for &id in &s.order {
        let task = dag.task(id);
        let d = task_duration(t, &task)?;
        let resources = s.resources(id);
        let ready = dag.predecessors(id).iter().map(|&p| finish[p]).fold(0.0, f64::max);
        let st = resources
            .iter()
            .map(|r| free_at.get(r).copied().unwrap_or(0.0))
            .fold(ready, f64::max);
        let fin = st + d;
        start[id] = st;
        finish[id] = fin;
        makespan = makespan.max(fin);
        let mut devices = Vec::new();
        for r in &resources {
            free_at.insert(*r, fin);
            if let Resource::Device(dev) = r {
                *busy.entry(*dev).or_insert(0.0) += d;
                devices.push(*dev);
            }
        }
        match task {
            Task::Forward { .. } => tf_total += d,
            Task::Backward { .. } => tb_total += d,
            Task::Comm { .. } => comm_s += d,
            Task::Update(_) => {}
        }
        timeline.push(TimelineEntry {
            task: task.to_string(),
            kind: task.kind_char(),
            start_s: st,
            finish_s: fin,
            devices,
            link: resources.contains(&Resource::Link),
        });
    }

    let peaks = peak_memory(s, &start, &finish, mem, model);
    let devices = busy
        .into_iter()
        .map(|(device, busy_s)| DeviceReport {
            device,
            busy_s,
            utilization: if makespan > 0.0 { busy_s / makespan } else { 0.0 },
            peak_mem_bytes: peaks.get(&device).copied().unwrap_or(0.0),
        })
        .collect();
    Ok(SimReport {
        makespan_s: makespan,
        devices,
        comm_s,
        tf_total_s: tf_total,
        tb_total_s: tb_total,
        timeline,
    })
}

fn peak_memory(
    s: &Schedule,
    start: &[f64],
    finish: &[f64],
    mem: MemoryPolicy,
    model: &MemoryModel,
) -> BTreeMap<usize, f64> {
    let dag = &s.dag;
    let end = s.order.iter().map(|&id| finish[id]).fold(0.0, f64::max);
    // last backward finish per module, for stash-all
    let mut last_backward: BTreeMap<usize, f64> = BTreeMap::new();
    for &id in &s.order {
        if let Task::Backward { module, .. } = dag.task(id) {
            let e = last_backward.entry(module).or_insert(0.0);
            *e = e.max(finish[id]);
        }
    }
    // (time, alloc?, device, task) so frees at a tie come first
    let mut events: Vec<(f64, bool, usize, usize, f64)> = Vec::new();
    for &id in &s.order {
        let Task::Forward { module, mb } = dag.task(id) else {
            continue;
        };
        let release = match mem {
            MemoryPolicy::Proposed => dag
                .id(&Task::Backward { module, mb })
                .filter(|b| s.order.contains(b))
                .map_or(end, |b| finish[b]),
            MemoryPolicy::StashAll => last_backward.get(&module).copied().unwrap_or(end),
        };
        for &device in dag.devices(id) {
            let bytes = model.activation(module, device, mb);
            if bytes > 0.0 {
                events.push((start[id], true, device, id, bytes));
                events.push((release, false, device, id, bytes));
            }
        }
    }
    events.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let mut live: BTreeMap<usize, f64> = BTreeMap::new();
    let mut peak: BTreeMap<usize, f64> = s.device_lists.keys().map(|&d| (d, 0.0)).collect();
    for (_, alloc, device, _, bytes) in events {
        let l = live.entry(device).or_insert(0.0);
        if alloc {
            *l += bytes;
            let p = peak.entry(device).or_insert(0.0);
            *p = p.max(*l);
        } else {
            *l -= bytes;
        }
    }
    for (device, p) in peak.iter_mut() {
        *p += model.params(*device);
    }
    peak
}

/// `T_s / T_p`.
pub fn speedup(t_s: f64, t_p: f64) -> Result<f64, SimError> {
    if t_p <= 0.0 || t_p.is_nan() {
        return Err(SimError::NonPositiveTime(t_p));
    }
    Ok(t_s / t_p)
}

/// Largest per-device peak under the proposed policy over the same under
/// stash-all.
pub fn memory_compare(g: &ModelGraph, plan: &PartitionPlan, s: &Schedule, t: &TaskCostTable) -> Result<f64, SimError> {
    let proposed = simulate(s, t, MemoryPolicy::Proposed, g, plan)?.peak_mem_max();
    let stash = simulate(s, t, MemoryPolicy::StashAll, g, plan)?.peak_mem_max();
    Ok(if stash > 0.0 { proposed / stash } else { 1.0 })
}

/// Schedules `plan` with the cost table's own durations.
pub fn schedule_for(
    plan: &PartitionPlan,
    t: &TaskCostTable,
    policy: Policy,
    overlap_comm: bool,
    updates: Option<UpdateMode>,
) -> Result<Schedule, SimError> {
    let dag = build_dependency_dag(plan, t.microbatches());
    // unpriced tasks surface as errors here rather than as zero-length slots
    for task in dag.tasks() {
        task_duration(t, task)?;
    }
    let s = schedule(
        &dag,
        policy,
        &|task| task_duration(t, task).unwrap_or(0.0),
        overlap_comm,
    );
    Ok(match updates {
        Some(mode) => attach_updates(&s, mode),
        None => s,
    })
}

/// Prices, schedules and simulates a plan in one step.
pub fn run_plan(
    g: &ModelGraph,
    plan: &PartitionPlan,
    params: &CostParams,
    policy: Policy,
    updates: Option<UpdateMode>,
    mem: MemoryPolicy,
) -> Result<(TaskCostTable, Schedule, SimReport), SimError> {
    let t = task_costs(plan, g, params).map_err(OptimizeError::from)?;
    let s = schedule_for(plan, &t, policy, params.overlap_comm, updates)?;
    let r = simulate(&s, &t, mem, g, plan)?;
    Ok((t, s, r))
}

/// Simulated pipelined makespan as an optimizer objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatedMakespan {
    pub updates: Option<UpdateMode>,
}

impl PlanObjective for SimulatedMakespan {
    fn evaluate(&self, plan: &PartitionPlan, g: &ModelGraph, params: &CostParams) -> Result<f64, OptimizeError> {
        run_plan(g, plan, params, Policy::Pipelined, self.updates, MemoryPolicy::Proposed)
            .map(|(_, _, r)| r.makespan_s)
            .map_err(|e| OptimizeError::Objective(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepObjective {
    #[default]
    TotalCost,
    Makespan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Samples per training batch.
    pub batch: usize,
    /// Micro-batches per batch; `None` uses the device count.
    pub m: Option<usize>,
    pub updates: UpdateMode,
    pub mem: MemoryPolicy,
    pub overlap_comm: bool,
    pub replicate_narrow: bool,
    pub objective: SweepObjective,
    pub budget: usize,
    pub memory_compare: bool,
    /// Policy of every sweep point; the baseline is always sequential.
    pub policy: Policy,
    /// Cap on `Z` handed to the optimizer.
    pub zmax: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            m: None,
            updates: UpdateMode::SyncBarrier,
            mem: MemoryPolicy::Proposed,
            overlap_comm: false,
            replicate_narrow: false,
            objective: SweepObjective::TotalCost,
            budget: 10_000,
            memory_compare: false,
            policy: Policy::Pipelined,
            zmax: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub z: usize,
    pub merges: usize,
    pub makespan_s: f64,
    pub speedup: f64,
    pub util_min: f64,
    pub util_mean: f64,
    pub peak_mem_bytes: f64,
    pub comm_s: f64,
    pub mem_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Sequential single-device makespan all speedups are measured against.
    pub t_s: f64,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<(OptimizerReport, SimReport)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let with_ratio = self.rows.iter().any(|r| r.mem_ratio.is_some());
        let mut out = String::from("n,Z,merges,makespan_s,speedup,util_min,util_mean,peak_mem_bytes,comm_s");
        if with_ratio {
            out.push_str(",mem_ratio");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{:.6},{:.4},{:.4},{:.4},{:.0},{:.6}",
                r.n, r.z, r.merges, r.makespan_s, r.speedup, r.util_min, r.util_mean, r.peak_mem_bytes, r.comm_s
            );
            if with_ratio {
                let _ = write!(out, ",{:.4}", r.mem_ratio.unwrap_or(1.0));
            }
            out.push('\n');
        }
        out
    }
}

fn microbatch_samples(batch: usize, m: usize) -> Result<Vec<u64>, SimError> {
    Ok(split_microbatches(batch, m)?.into_iter().map(|s| s as u64).collect())
}

/// Makespan of the whole batch run sequentially on one device as one
/// sub-module and one micro-batch: the `T_s` of every speedup.
pub fn sequential_baseline(g: &ModelGraph, template: &ClusterSpec, cfg: &SweepConfig) -> Result<f64, SimError> {
    let opts = crate::partition::PlanOptions {
        replicate_narrow: cfg.replicate_narrow,
    };
    let plan = build_plan(g, 1, 1, opts).map_err(OptimizeError::from)?;
    let params = CostParams {
        cluster: template.scaled_to(1),
        microbatch_samples: microbatch_samples(cfg.batch, 1)?,
        overlap_comm: cfg.overlap_comm,
    };
    let (_, _, base) = run_plan(g, &plan, &params, Policy::Sequential, Some(cfg.updates), cfg.mem)?;
    Ok(base.makespan_s)
}

/// Optimizes, schedules and simulates the model at each device count.
/// Speedups are measured against a sequential single-device run.
pub fn sweep(
    g: &ModelGraph,
    template: &ClusterSpec,
    n_list: &[usize],
    cfg: &SweepConfig,
) -> Result<SweepResult, SimError> {
    if n_list.is_empty() {
        return Err(SimError::EmptySweep);
    }
    if n_list[0] == 0 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::BadSweepOrder);
    }
    let opts = crate::partition::PlanOptions {
        replicate_narrow: cfg.replicate_narrow,
    };
    let t_s = sequential_baseline(g, template, cfg)?;

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &n in n_list {
        let m = cfg.m.unwrap_or(n);
        let mut oc = OptimizeConfig::new(template.scaled_to(n), n, microbatch_samples(cfg.batch, m)?);
        oc.overlap_comm = cfg.overlap_comm;
        oc.budget = cfg.budget;
        oc.plan_options = opts;
        oc.zmax = cfg.zmax;
        let objective: Box<dyn PlanObjective> = match cfg.objective {
            SweepObjective::TotalCost => Box::new(TotalCost),
            SweepObjective::Makespan => Box::new(SimulatedMakespan {
                updates: Some(cfg.updates),
            }),
        };
        let opt = optimize_plan(g, &oc, objective.as_ref())?;
        let params = CostParams {
            cluster: oc.cluster.clone(),
            microbatch_samples: oc.microbatch_samples.clone(),
            overlap_comm: cfg.overlap_comm,
        };
        let (t, s, report) = run_plan(g, &opt.plan, &params, cfg.policy, Some(cfg.updates), cfg.mem)?;
        let mem_ratio = if cfg.memory_compare {
            Some(memory_compare(g, &opt.plan, &s, &t)?)
        } else {
            None
        };
        rows.push(SweepRow {
            n,
            z: opt.plan.z(),
            merges: opt.plan.merge_count(),
            makespan_s: report.makespan_s,
            speedup: speedup(t_s, report.makespan_s)?,
            util_min: report.util_min(),
            util_mean: report.util_mean(),
            peak_mem_bytes: report.peak_mem_max(),
            comm_s: report.comm_s,
            mem_ratio,
        });
        reports.push((opt, report));
    }
    Ok(SweepResult { t_s, rows, reports })
}

/// Maximum columns of a Gantt rendering.
pub const GANTT_MAX_COLUMNS: usize = 120;

/// Text Gantt chart: one row per device plus one for the link, one column
/// per time slot, each cell the kind of task running at the slot's midpoint
/// (`.` when idle). `slot_s` defaults to the shortest task.
pub fn render_gantt(r: &SimReport, slot_s: Option<f64>) -> String {
    let shortest = r
        .timeline
        .iter()
        .map(|e| e.finish_s - e.start_s)
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let mut slot = slot_s.filter(|&s| s > 0.0).unwrap_or(shortest);
    if !slot.is_finite() || r.makespan_s <= 0.0 {
        return "(empty schedule)\n".to_string();
    }
    if r.makespan_s / slot > GANTT_MAX_COLUMNS as f64 {
        slot = r.makespan_s / GANTT_MAX_COLUMNS as f64;
    }
    let cols = (r.makespan_s / slot).ceil() as usize;
    let mut rows: Vec<(String, Vec<char>)> = r
        .devices
        .iter()
        .map(|d| (format!("dev {}", d.device), vec!['.'; cols]))
        .collect();
    rows.push(("link".to_string(), vec!['.'; cols]));
    let link_row = rows.len() - 1;
    let row_of: BTreeMap<usize, usize> = r.devices.iter().enumerate().map(|(i, d)| (d.device, i)).collect();

    for e in &r.timeline {
        for (c, cell_mid) in (0..cols).map(|c| (c, (c as f64 + 0.5) * slot)) {
            if cell_mid >= e.start_s && cell_mid < e.finish_s {
                for dev in &e.devices {
                    if let Some(&row) = row_of.get(dev) {
                        rows[row].1[c] = e.kind;
                    }
                }
                if e.link {
                    rows[link_row].1[c] = e.kind;
                }
            }
        }
    }
    let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0);
    let mut out = format!("slot = {slot:.6} s, makespan = {:.6} s\n", r.makespan_s);
    for (name, cells) in rows {
        let _ = writeln!(out, "{name:>width$} |{}|", cells.into_iter().collect::<String>());
    }
    out
}

/// Kind of transfer a task stands for, for callers that only see names.
pub fn comm_direction(task: &Task) -> Option<Direction> {
    match task {
        Task::Comm { dir, .. } => Some(*dir),
        _ => None,
    }
}
