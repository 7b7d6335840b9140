//! The `pipemerge` command line: plan, schedule, simulate, verify and demo
//! subcommands over model and cluster documents.
//!
//! Every `cmd_*` function writes its files under [`RunConfig::out`] and
//! nowhere else. Outputs depend only on the inputs and the seed.

use clap::{Args, Parser, Subcommand, ValueEnum};
use pipemerge::cost::{task_costs, CostParams};
use pipemerge::model::{ClusterSpec, LayerKind, ModelGraph};
use pipemerge::optimize::{optimize_plan, OptimizeConfig, OptimizerReport, PlanObjective, TotalCost};
use pipemerge::partition::{PartitionPlan, PlanOptions};
use pipemerge::schedule::{split_microbatches, Policy, UpdateMode};
use pipemerge::sim::{
    memory_compare, render_gantt, run_plan, schedule_for, sequential_baseline, speedup, sweep, MemoryPolicy,
    SimulatedMakespan, SweepConfig, SweepObjective, SweepResult, SweepRow,
};
use pipemerge::verify::data::{batches, two_blobs};
use pipemerge::verify::net::{history_csv, train_sequential};
use pipemerge::verify::{
    run_suite, train_partitioned, Activation, LossKind, PartitionedOptions, SuiteOptions, TinyNet, TrainConfig,
};
use serde::Serialize;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Bytes per activation unit and per parameter in model cost defaults.
pub const BYTES_PER_UNIT: u64 = 4;

pub const DEMO_MODEL: &str = include_str!("../data/demo_model.json");
pub const DEMO_CLUSTER: &str = include_str!("../data/demo_cluster.json");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            _ => 2,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Seq,
    Pipe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpdateArg {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MemoryArg {
    Proposed,
    StashAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    /// Summed task seconds.
    Cost,
    /// Simulated makespan.
    Makespan,
}

/// Everything a subcommand needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Model document; the bundled demo model when absent.
    pub model: Option<PathBuf>,
    /// Cluster document; the bundled demo cluster when absent.
    pub cluster: Option<PathBuf>,
    /// Plan document to use instead of optimizing.
    pub plan: Option<PathBuf>,
    pub n: usize,
    /// Cap on the sub-module count.
    pub z: Option<usize>,
    /// Micro-batches per batch; defaults to `n`.
    pub m: Option<usize>,
    pub policy: Policy,
    pub update: UpdateMode,
    pub memory: MemoryPolicy,
    pub seed: u64,
    pub out: PathBuf,
    pub replicate_narrow: bool,
    pub overlap_comm: bool,
    /// Samples per batch.
    pub batch: usize,
    pub objective: SweepObjective,
    pub sweep: Option<Vec<usize>>,
    pub memory_compare: bool,
    /// Random instances per verification property.
    pub seeds: usize,
    pub inject_fault: bool,
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    /// Size of the demo dataset.
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            cluster: None,
            plan: None,
            n: 2,
            z: None,
            m: None,
            policy: Policy::Pipelined,
            update: UpdateMode::SyncBarrier,
            memory: MemoryPolicy::Proposed,
            seed: 0,
            out: PathBuf::from("out"),
            replicate_narrow: false,
            overlap_comm: false,
            batch: 6,
            objective: SweepObjective::TotalCost,
            sweep: None,
            memory_compare: false,
            seeds: 100,
            inject_fault: false,
            epochs: 50,
            lr: 1e-4,
            decay: 1e-2,
            samples: 96,
        }
    }
}

impl RunConfig {
    pub fn microbatches(&self) -> usize {
        self.m.unwrap_or(self.n)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.n == 0 {
            return Err(CliError::Usage("-n must be at least 1".into()));
        }
        if self.z == Some(0) {
            return Err(CliError::Usage("-Z must be at least 1".into()));
        }
        if self.m == Some(0) {
            return Err(CliError::Usage("-m must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(CliError::Usage("--batch must be at least 1".into()));
        }
        if self.microbatches() > self.batch {
            return Err(CliError::Usage(format!(
                "{} micro-batches do not fit a batch of {} samples",
                self.microbatches(),
                self.batch
            )));
        }
        Ok(())
    }

    fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            replicate_narrow: self.replicate_narrow,
        }
    }

    fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            batch: self.batch,
            m: self.m,
            updates: self.update,
            mem: self.memory,
            overlap_comm: self.overlap_comm,
            replicate_narrow: self.replicate_narrow,
            objective: self.objective,
            memory_compare: self.memory_compare,
            policy: self.policy,
            zmax: self.z,
            ..SweepConfig::default()
        }
    }
}

fn read_document(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => CliError::Input(format!("{what} file not found: {}", path.display())),
        _ => CliError::Input(format!("cannot read {what} file {}: {e}", path.display())),
    })
}

/// The model with unspecified costs filled in.
pub fn load_model(cfg: &RunConfig) -> Result<ModelGraph, CliError> {
    let (text, name) = match &cfg.model {
        Some(p) => (read_document(p, "model")?, p.display().to_string()),
        None => (DEMO_MODEL.to_string(), "demo model".to_string()),
    };
    let g = ModelGraph::from_json(&text).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
    Ok(g.default_costs(BYTES_PER_UNIT))
}

pub fn load_cluster(cfg: &RunConfig) -> Result<ClusterSpec, CliError> {
    let (text, name) = match &cfg.cluster {
        Some(p) => (read_document(p, "cluster")?, p.display().to_string()),
        None => (DEMO_CLUSTER.to_string(), "demo cluster".to_string()),
    };
    ClusterSpec::from_json(&text).map_err(|e| CliError::Input(format!("{name}: {e}")))
}

fn write(out: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(|source| CliError::Write {
        path: out.to_path_buf(),
        source,
    })?;
    let path = out.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Write {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Files a subcommand wrote and a short human summary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

fn samples(cfg: &RunConfig) -> Result<Vec<u64>, CliError> {
    Ok(split_microbatches(cfg.batch, cfg.microbatches())
        .map_err(|e| CliError::Usage(e.to_string()))?
        .into_iter()
        .map(|s| s as u64)
        .collect())
}

fn optimize(cfg: &RunConfig, g: &ModelGraph, cluster: &ClusterSpec) -> Result<OptimizerReport, CliError> {
    let mut oc = OptimizeConfig::new(cluster.scaled_to(cfg.n), cfg.n, samples(cfg)?);
    oc.overlap_comm = cfg.overlap_comm;
    oc.zmax = cfg.z;
    oc.plan_options = cfg.plan_options();
    let objective: Box<dyn PlanObjective> = match cfg.objective {
        SweepObjective::TotalCost => Box::new(TotalCost),
        SweepObjective::Makespan => Box::new(SimulatedMakespan {
            updates: Some(cfg.update),
        }),
    };
    optimize_plan(g, &oc, objective.as_ref()).map_err(input)
}

fn cost_params(cfg: &RunConfig, cluster: &ClusterSpec) -> Result<CostParams, CliError> {
    Ok(CostParams {
        cluster: cluster.scaled_to(cfg.n),
        microbatch_samples: samples(cfg)?,
        overlap_comm: cfg.overlap_comm,
    })
}

/// The plan file named in the config, or the optimizer's choice.
fn resolve_plan(
    cfg: &RunConfig,
    g: &ModelGraph,
    cluster: &ClusterSpec,
) -> Result<(PartitionPlan, Option<OptimizerReport>), CliError> {
    match &cfg.plan {
        Some(p) => {
            let text = read_document(p, "plan")?;
            let plan =
                PartitionPlan::from_json(&text, g).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            if plan.n != cfg.n {
                return Err(CliError::Input(format!(
                    "plan spans {} devices but -n is {}",
                    plan.n, cfg.n
                )));
            }
            Ok((plan, None))
        }
        None => {
            let report = optimize(cfg, g, cluster)?;
            Ok((report.plan.clone(), Some(report)))
        }
    }
}

/// Optimizes a plan and writes `plan.json` and `optimizer_report.json`.
pub fn cmd_plan(cfg: &RunConfig) -> Result<Outcome, CliError> {
    cfg.check()?;
    let g = load_model(cfg)?;
    let cluster = load_cluster(cfg)?;
    let report = optimize(cfg, &g, &cluster)?;
    let files = vec![
        write(&cfg.out, "plan.json", &(report.plan.to_json() + "\n"))?,
        write(&cfg.out, "optimizer_report.json", &(report.to_json() + "\n"))?,
    ];
    let b = report.breakdown;
    Ok(Outcome {
        files,
        summary: format!(
            "Z={} merges={} search={:?} evaluated={} sum_tf={:.6e} sum_tb={:.6e} sum_tcomm={:.6e} total={:.6e}",
            report.plan.z(),
            report.plan.merge_count(),
            report.search,
            report.candidates_evaluated,
            b.sum_tf,
            b.sum_tb,
            b.sum_tcomm,
            b.total
        ),
    })
}

/// Schedules the plan and writes `plan.json` and `schedule.json`.
pub fn cmd_schedule(cfg: &RunConfig) -> Result<Outcome, CliError> {
    cfg.check()?;
    let g = load_model(cfg)?;
    let cluster = load_cluster(cfg)?;
    let (plan, _) = resolve_plan(cfg, &g, &cluster)?;
    let t = task_costs(&plan, &g, &cost_params(cfg, &cluster)?).map_err(input)?;
    let s = schedule_for(&plan, &t, cfg.policy, cfg.overlap_comm, Some(cfg.update)).map_err(input)?;
    s.verify().map_err(CliError::Input)?;
    let doc = serde_json::to_string_pretty(&s.to_document()).expect("schedule serializes");
    let mut listing = String::new();
    for d in &s.to_document().devices {
        let _ = writeln!(listing, "device {}: {}", d.device, d.tasks.join(" "));
    }
    let files = vec![
        write(&cfg.out, "plan.json", &(plan.to_json() + "\n"))?,
        write(&cfg.out, "schedule.json", &(doc + "\n"))?,
    ];
    Ok(Outcome {
        files,
        summary: listing,
    })
}

/// Simulates one plan, or a sweep over device counts, and writes CSV,
/// Gantt text and JSON reports.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    cfg.check()?;
    let g = load_model(cfg)?;
    let cluster = load_cluster(cfg)?;
    let sc = cfg.sweep_config();
    let mut files = Vec::new();

    if let Some(list) = &cfg.sweep {
        if cfg.plan.is_some() {
            return Err(CliError::Usage("--plan cannot be combined with --sweep".into()));
        }
        if let Some(&too_many) = list.iter().find(|&&n| cfg.m.unwrap_or(n) > cfg.batch) {
            return Err(CliError::Usage(format!(
                "n={too_many} needs more micro-batches than the batch of {} has samples",
                cfg.batch
            )));
        }
        let result = sweep(&g, &cluster, list, &sc).map_err(input)?;
        files.push(write(&cfg.out, "sweep.csv", &result.to_csv())?);
        for (opt, report) in &result.reports {
            let n = opt.plan.n;
            files.push(write(
                &cfg.out,
                &format!("gantt_n{n}.txt"),
                &render_gantt(report, None),
            )?);
        }
        return Ok(Outcome {
            files,
            summary: result.to_csv(),
        });
    }

    let (plan, _) = resolve_plan(cfg, &g, &cluster)?;
    let params = cost_params(cfg, &cluster)?;
    let (t, s, report) = run_plan(&g, &plan, &params, cfg.policy, Some(cfg.update), cfg.memory).map_err(input)?;
    let t_s = sequential_baseline(&g, &cluster, &sc).map_err(input)?;
    let mem_ratio = if cfg.memory_compare {
        Some(memory_compare(&g, &plan, &s, &t).map_err(input)?)
    } else {
        None
    };
    let row = SweepRow {
        n: cfg.n,
        z: plan.z(),
        merges: plan.merge_count(),
        makespan_s: report.makespan_s,
        speedup: speedup(t_s, report.makespan_s).map_err(input)?,
        util_min: report.util_min(),
        util_mean: report.util_mean(),
        peak_mem_bytes: report.peak_mem_max(),
        comm_s: report.comm_s,
        mem_ratio,
    };
    let csv = SweepResult {
        t_s,
        rows: vec![row],
        reports: Vec::new(),
    }
    .to_csv();
    files.push(write(&cfg.out, "plan.json", &(plan.to_json() + "\n"))?);
    files.push(write(&cfg.out, "simulation.csv", &csv)?);
    files.push(write(&cfg.out, "sim_report.json", &(report.to_json() + "\n"))?);
    let gantt = render_gantt(&report, None);
    files.push(write(&cfg.out, "gantt.txt", &gantt)?);
    Ok(Outcome {
        files,
        summary: format!("{csv}{gantt}"),
    })
}

/// Runs the seeded property suite and writes `verify_report.json`. Fails
/// with exit code 1 when any property fails.
pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome, CliError> {
    if cfg.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let first = cfg.seed;
    let report = run_suite(
        (0..cfg.seeds as u64).map(|k| first.wrapping_add(k)),
        SuiteOptions {
            inject_fault: cfg.inject_fault,
        },
    );
    let file = write(&cfg.out, "verify_report.json", &(report.to_json() + "\n"))?;
    let mut table = String::new();
    for p in &report.properties {
        let _ = writeln!(
            table,
            "{:<22} {:>4} instances  max error {:.3e}  tolerance {:.0e}  {}",
            p.name,
            p.instances,
            p.max_error,
            p.tolerance,
            if p.pass { "PASS" } else { "FAIL" }
        );
    }
    if !report.pass {
        let failed: Vec<String> = report
            .properties
            .iter()
            .filter(|p| !p.pass)
            .map(|p| format!("{} (seed {})", p.name, p.failing_seed.unwrap_or_default()))
            .collect();
        return Err(CliError::Verification(format!(
            "{}\n{table}instance: {}",
            failed.join(", "),
            report.failure.as_deref().unwrap_or("unavailable")
        )));
    }
    Ok(Outcome {
        files: vec![file],
        summary: table,
    })
}

#[derive(Debug, Serialize)]
struct DemoReport {
    model: String,
    n: usize,
    z: usize,
    merges: usize,
    m: usize,
    batch: usize,
    epochs: usize,
    iterations: usize,
    lr: f64,
    decay: f64,
    loss: LossKind,
    final_loss: f64,
    final_acc: f64,
    sequential_final_loss: f64,
    max_rel_diff_vs_sequential: f64,
}

/// Trains the model as a dense network on seeded two-class data, once
/// sequentially and once through the optimized plan, then simulates the
/// plan. Defaults: batch 6, cross-entropy, 50 epochs, learning rate 1e-4
/// with decay 1e-2.
pub fn cmd_demo(cfg: &RunConfig) -> Result<Outcome, CliError> {
    cfg.check()?;
    let g = load_model(cfg)?;
    let cluster = load_cluster(cfg)?;
    if g.layers().iter().any(|l| l.kind != LayerKind::Dense) {
        return Err(CliError::Input("the demo trains dense layers only".into()));
    }
    if cfg.epochs == 0 || cfg.samples < cfg.batch {
        return Err(CliError::Usage(
            "demo needs at least one epoch and one full batch".into(),
        ));
    }
    let mut widths = vec![g.layers()[0].fan_in];
    widths.extend(g.layers().iter().map(|l| l.fan_out));
    let out_width = *widths.last().expect("model has layers");
    let (kind, last) = if out_width >= 2 {
        (LossKind::CrossEntropy, Activation::Softmax)
    } else {
        (LossKind::Mse, Activation::Identity)
    };
    let mut acts = vec![Activation::Relu; g.len() - 1];
    acts.push(last);
    let net = TinyNet::random(&widths, &acts, cfg.seed).map_err(input)?;
    let data = batches(&two_blobs(cfg.samples, widths[0], 3.0, cfg.seed), cfg.batch);
    let train = TrainConfig {
        lr: cfg.lr,
        decay: cfg.decay,
        loss: kind,
        iterations: cfg.epochs * data.len(),
        seed: cfg.seed,
    };

    let (plan, opt) = resolve_plan(cfg, &g, &cluster)?;
    let opts = PartitionedOptions {
        mode: cfg.update,
        ..PartitionedOptions::default()
    };
    let run = train_partitioned(&net, &data, &train, &plan, cfg.microbatches(), &opts).map_err(input)?;
    let (seq, seq_hist) = train_sequential(&net, &data, &train).map_err(input)?;
    let last_entry = run.history.last().expect("at least one iteration");

    let params = cost_params(cfg, &cluster)?;
    let (_, _, report) = run_plan(&g, &plan, &params, cfg.policy, Some(cfg.update), cfg.memory).map_err(input)?;

    let demo = DemoReport {
        model: g.name().to_string(),
        n: cfg.n,
        z: plan.z(),
        merges: plan.merge_count(),
        m: cfg.microbatches(),
        batch: cfg.batch,
        epochs: cfg.epochs,
        iterations: train.iterations,
        lr: cfg.lr,
        decay: cfg.decay,
        loss: kind,
        final_loss: last_entry.loss,
        final_acc: last_entry.acc,
        sequential_final_loss: seq_hist.last().map_or(f64::NAN, |h| h.loss),
        max_rel_diff_vs_sequential: run.net.max_rel_diff(&seq, 1e-9),
    };
    let mut files = vec![write(&cfg.out, "plan.json", &(plan.to_json() + "\n"))?];
    if let Some(opt) = opt {
        files.push(write(&cfg.out, "optimizer_report.json", &(opt.to_json() + "\n"))?);
    }
    files.push(write(&cfg.out, "history.csv", &history_csv(&run.history))?);
    files.push(write(&cfg.out, "sim_report.json", &(report.to_json() + "\n"))?);
    files.push(write(&cfg.out, "gantt.txt", &render_gantt(&report, None))?);
    let json = serde_json::to_string_pretty(&demo).expect("demo report serializes");
    files.push(write(&cfg.out, "demo_report.json", &(json + "\n"))?);
    Ok(Outcome {
        files,
        summary: format!(
            "trained {} iterations on Z={} (merges {}): loss {:.6} acc {:.4}, max relative difference to sequential {:.3e}, simulated makespan {:.6e} s",
            train.iterations,
            plan.z(),
            plan.merge_count(),
            demo.final_loss,
            demo.final_acc,
            demo.max_rel_diff_vs_sequential,
            report.makespan_s
        ),
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "pipemerge",
    version,
    about = "Partition, merge, schedule and simulate layer-parallel training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Choose sub-modules and merges; write the plan and its cost breakdown.
    Plan(Common),
    /// Write the per-device task order of a plan.
    Schedule(WithPlan),
    /// Simulate a plan, or sweep device counts.
    Simulate(SimulateArgs),
    /// Run the seeded numerical property suite.
    Verify(VerifyArgs),
    /// Train the model on synthetic data through an optimized plan.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Model document [default: bundled demo model]
    #[arg(long)]
    model: Option<PathBuf>,
    /// Cluster document [default: bundled demo cluster]
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// Device count
    #[arg(short = 'n', default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Upper bound on the sub-module count
    #[arg(short = 'Z', value_parser = clap::value_parser!(u64).range(1..))]
    z: Option<u64>,
    /// Micro-batches per batch [default: n]
    #[arg(short = 'm', value_parser = clap::value_parser!(u64).range(1..))]
    m: Option<u64>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Pipe)]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = UpdateArg::Sync)]
    update: UpdateArg,
    #[arg(long, value_enum, default_value_t = MemoryArg::Proposed)]
    memory: MemoryArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replicate layers narrower than n instead of failing
    #[arg(long)]
    replicate_narrow: bool,
    /// Let transfers run alongside computation
    #[arg(long)]
    overlap_comm: bool,
    /// Samples per batch
    #[arg(long, default_value_t = 6)]
    batch: usize,
    /// What the optimizer minimizes
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Cost)]
    objective: ObjectiveArg,
}

#[derive(Debug, Args)]
struct WithPlan {
    #[command(flatten)]
    common: Common,
    /// Plan document to use instead of optimizing
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    with_plan: WithPlan,
    /// Comma-separated increasing device counts
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<usize>>,
    /// Add the proposed/stash-all peak memory ratio
    #[arg(long)]
    memory_compare: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Instances per property
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    /// First instance seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negate one gradient shard before every update
    #[arg(long)]
    inject_fault: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[command(flatten)]
    with_plan: WithPlan,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    decay: f64,
    /// Samples in the synthetic dataset
    #[arg(long, default_value_t = 96)]
    samples: usize,
}

fn from_common(c: Common, plan: Option<PathBuf>) -> RunConfig {
    RunConfig {
        model: c.model,
        cluster: c.cluster,
        plan,
        n: c.n as usize,
        z: c.z.map(|z| z as usize),
        m: c.m.map(|m| m as usize),
        policy: match c.policy {
            PolicyArg::Seq => Policy::Sequential,
            PolicyArg::Pipe => Policy::Pipelined,
        },
        update: match c.update {
            UpdateArg::Sync => UpdateMode::SyncBarrier,
            UpdateArg::Async => UpdateMode::AsyncPerModule,
        },
        memory: match c.memory {
            MemoryArg::Proposed => MemoryPolicy::Proposed,
            MemoryArg::StashAll => MemoryPolicy::StashAll,
        },
        seed: c.seed,
        out: c.out,
        replicate_narrow: c.replicate_narrow,
        overlap_comm: c.overlap_comm,
        batch: c.batch,
        objective: match c.objective {
            ObjectiveArg::Cost => SweepObjective::TotalCost,
            ObjectiveArg::Makespan => SweepObjective::Makespan,
        },
        ..RunConfig::default()
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
/// Summaries go to stdout, diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_to(args, &mut std::io::stdout().lock())
}

/// [`run`] with summaries written to `stdout`.
pub fn run_to<I, T, W>(args: I, stdout: &mut W) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    W: std::io::Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Plan(c) => cmd_plan(&from_common(c, None)),
        Command::Schedule(w) => cmd_schedule(&from_common(w.common, w.plan)),
        Command::Simulate(s) => {
            let mut cfg = from_common(s.with_plan.common, s.with_plan.plan);
            cfg.sweep = s.sweep;
            cfg.memory_compare = s.memory_compare;
            cmd_simulate(&cfg)
        }
        Command::Verify(v) => cmd_verify(&RunConfig {
            seeds: v.seeds,
            seed: v.seed,
            inject_fault: v.inject_fault,
            out: v.out,
            ..RunConfig::default()
        }),
        Command::Demo(d) => {
            let mut cfg = from_common(d.with_plan.common, d.with_plan.plan);
            cfg.epochs = d.epochs;
            cfg.lr = d.lr;
            cfg.decay = d.decay;
            cfg.samples = d.samples;
            cmd_demo(&cfg)
        }
    };
    match result {
        Ok(outcome) => {
            // a closed stdout (say, piped into `head`) is not a failure
            let _ = write!(stdout, "{}", outcome.summary);
            if !outcome.summary.ends_with('\n') {
                let _ = writeln!(stdout);
            }
            for f in &outcome.files {
                let _ = writeln!(stdout, "wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
