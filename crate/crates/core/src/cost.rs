//! Task pricing and the total-cost objective.
//!
//! Flops and bytes are turned into seconds with the cluster's device
//! throughputs and its alpha–beta link. A sub-module's forward or backward
//! task costs as much as its slowest participating device, since the shards
//! are concatenated synchronously.

use crate::model::{ClusterSpec, ModelGraph};
use crate::partition::{shard_share, PartitionPlan, PlanError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("at least one micro-batch is required")]
    NoMicrobatches,
    #[error("micro-batch {index} has zero samples")]
    EmptyMicrobatch { index: usize },
}

/// Seconds for every task of one training batch.
///
/// Indices are 0-based here: `tf[i][j]` prices the forward pass of
/// sub-module `i+1` on micro-batch `j+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCostTable {
    pub tf: Vec<Vec<f64>>,
    pub tb: Vec<Vec<f64>>,
    /// `tcomm[k][j]`: one transfer across boundary `k+1` for micro-batch `j+1`.
    pub tcomm: Vec<Vec<f64>>,
    /// Output exchange the loss needs when the last sub-module is sharded
    /// over several devices, per micro-batch.
    pub tloss: Vec<f64>,
    /// Parameter update of each sub-module.
    pub tu: Vec<f64>,
    /// One global update of every sub-module.
    pub tu_all: f64,
    /// Samples in each micro-batch.
    pub samples: Vec<u64>,
}

impl TaskCostTable {
    /// A table with explicit per-task times and no loss exchange or update cost.
    pub fn from_parts(tf: Vec<Vec<f64>>, tb: Vec<Vec<f64>>, tcomm: Vec<Vec<f64>>) -> Self {
        let z = tf.len();
        let m = tf.first().map_or(0, Vec::len);
        Self {
            tf,
            tb,
            tcomm,
            tloss: vec![0.0; m],
            tu: vec![0.0; z],
            tu_all: 0.0,
            samples: vec![1; m],
        }
    }

    /// Micro-batch count, `m`.
    pub fn microbatches(&self) -> usize {
        self.samples.len()
    }

    pub fn modules(&self) -> usize {
        self.tf.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    pub cluster: ClusterSpec,
    /// Samples per micro-batch; its length is the micro-batch count.
    pub microbatch_samples: Vec<u64>,
    pub overlap_comm: bool,
}

impl CostParams {
    /// `m` micro-batches of `samples` each.
    pub fn uniform(cluster: ClusterSpec, samples: u64, m: usize) -> Self {
        Self {
            cluster,
            microbatch_samples: vec![samples; m],
            overlap_comm: false,
        }
    }
}

/// Prices every forward, backward, communication and update task.
pub fn task_costs(plan: &PartitionPlan, g: &ModelGraph, params: &CostParams) -> Result<TaskCostTable, CostError> {
    plan.validate(g, Some(&params.cluster))?;
    let samples = &params.microbatch_samples;
    if samples.is_empty() {
        return Err(CostError::NoMicrobatches);
    }
    if let Some(index) = samples.iter().position(|&s| s == 0) {
        return Err(CostError::EmptyMicrobatch { index: index + 1 });
    }
    let cluster = &params.cluster;

    // per sub-module: slowest device's seconds per sample
    let mut fwd_rate = Vec::with_capacity(plan.z());
    let mut bwd_rate = Vec::with_capacity(plan.z());
    let mut tu = Vec::with_capacity(plan.z());
    let mut update_per_device = vec![0.0; plan.devices().last().copied().unwrap_or(0) + 1];
    for sub in &plan.submodules {
        let (mut worst_f, mut worst_b, mut worst_u) = (0.0f64, 0.0f64, 0.0f64);
        for &d in &sub.devices {
            let speed = cluster.device(d).expect("plan validated against cluster").flops_per_sec;
            let (mut f, mut b, mut params) = (0.0, 0.0, 0.0);
            for shard in sub.device_shards(d) {
                let layer = g.layer(shard.layer_id).expect("plan validated against model");
                let share = shard_share(shard, layer, plan.is_replicated(g, layer.id));
                f += layer.fwd_flops as f64 * share;
                b += layer.bwd_flops as f64 * share;
                params += layer.param_count as f64 * share;
            }
            // an SGD step is one multiply and one subtract per parameter
            let update = 2.0 * params / speed;
            update_per_device[d] += update;
            worst_f = worst_f.max(f / speed);
            worst_b = worst_b.max(b / speed);
            worst_u = worst_u.max(update);
        }
        fwd_rate.push(worst_f);
        bwd_rate.push(worst_b);
        tu.push(worst_u);
    }

    let per_mb = |rate: f64| -> Vec<f64> { samples.iter().map(|&s| rate * s as f64).collect() };
    let tf = fwd_rate.iter().map(|&r| per_mb(r)).collect();
    let tb = bwd_rate.iter().map(|&r| per_mb(r)).collect();
    let tcomm = (1..plan.z())
        .map(|k| {
            samples
                .iter()
                .map(|&s| cluster.transfer_time(plan.boundary_volume(g, k, s)))
                .collect()
        })
        .collect();
    let tloss = samples
        .iter()
        .map(|&s| cluster.transfer_time(loss_exchange_volume(plan, g, s)))
        .collect();

    Ok(TaskCostTable {
        tf,
        tb,
        tcomm,
        tloss,
        tu,
        tu_all: update_per_device.into_iter().fold(0.0, f64::max),
        samples: samples.clone(),
    })
}

/// Bytes the last sub-module's devices exchange so the loss sees whole output
/// rows: a gather of the output shards plus a scatter of the error signal.
/// Free when the output is held by one device or replicated.
pub fn loss_exchange_volume(plan: &PartitionPlan, g: &ModelGraph, samples: u64) -> f64 {
    let last = plan.submodules.last().expect("plan has a sub-module");
    let k = last.devices.len();
    if k <= 1 || plan.is_replicated(g, last.last_layer) {
        return 0.0;
    }
    let layer = g.layer(last.last_layer).expect("plan validated against model");
    let spread = (k as f64 - 1.0) / k as f64;
    2.0 * layer.act_bytes as f64 * samples as f64 * spread
}

/// Per-term sums of a cost table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub sum_tf: f64,
    pub sum_tb: f64,
    /// Boundary transfers plus the loss exchange.
    pub sum_tcomm: f64,
    pub total: f64,
}

fn sum2(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().sum()
}

/// Summed forward, backward and communication seconds over all sub-modules
/// and micro-batches.
pub fn total_cost(t: &TaskCostTable) -> f64 {
    breakdown(t).total
}

pub fn breakdown(t: &TaskCostTable) -> CostBreakdown {
    let sum_tf = sum2(&t.tf);
    let sum_tb = sum2(&t.tb);
    let sum_tcomm = sum2(&t.tcomm) + t.tloss.iter().sum::<f64>();
    CostBreakdown {
        sum_tf,
        sum_tb,
        sum_tcomm,
        total: sum_tf + sum_tb + sum_tcomm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, ModelGraph};
    use crate::partition::{build_plan, PlanOptions};

    fn one_layer(fwd: u64) -> ModelGraph {
        let layer = LayerSpec {
            fwd_flops: fwd,
            ..LayerSpec::dense(4, 8)
        };
        ModelGraph::new("one", vec![layer]).unwrap()
    }

    #[test]
    fn single_device_forward_time() {
        let g = one_layer(64);
        let plan = build_plan(&g, 1, 1, PlanOptions::default()).unwrap();
        let params = CostParams::uniform(ClusterSpec::uniform(1, 64.0, 1, 0.0, 1.0), 1, 1);
        let t = task_costs(&plan, &g, &params).unwrap();
        assert_eq!(t.tf, vec![vec![1.0]]);
        assert!(t.tcomm.is_empty());
    }

    #[test]
    fn even_split_over_two_devices() {
        let g = one_layer(128);
        let plan = build_plan(&g, 2, 1, PlanOptions::default()).unwrap();
        let params = CostParams::uniform(ClusterSpec::uniform(2, 64.0, 1, 0.0, f64::INFINITY), 1, 1);
        let t = task_costs(&plan, &g, &params).unwrap();
        assert_eq!(t.tf, vec![vec![1.0]]);
    }

    #[test]
    fn slowest_shard_prices_the_task() {
        let g = one_layer(128);
        let plan = build_plan(&g, 2, 1, PlanOptions::default()).unwrap();
        let mut cluster = ClusterSpec::uniform(2, 64.0, 1, 0.0, 1.0);
        cluster.devices[1].flops_per_sec = 32.0;
        let t = task_costs(&plan, &g, &CostParams::uniform(cluster, 1, 1)).unwrap();
        assert_eq!(t.tf, vec![vec![2.0]]);
    }

    #[test]
    fn merged_matching_boundary_is_free() {
        let g = ModelGraph::dense_chain("c", &[4, 8, 8]).unwrap().default_costs(4);
        let plan = build_plan(&g, 2, 2, PlanOptions::default()).unwrap();
        let params = CostParams::uniform(ClusterSpec::uniform(2, 1e3, 1, 0.5, 1e3), 1, 3);
        let t = task_costs(&plan, &g, &params).unwrap();
        assert!(t.tcomm[0].iter().all(|&c| c > 0.5));
        let merged = plan.merge_submodules(&[1, 2]).unwrap();
        let t = task_costs(&merged, &g, &params).unwrap();
        assert_eq!(t.tcomm, vec![vec![0.0; 3]]);
    }

    #[test]
    fn loss_exchange_only_when_output_is_sharded() {
        let g = ModelGraph::dense_chain("c", &[4, 8]).unwrap().default_costs(4);
        let cluster = ClusterSpec::uniform(2, 1e3, 1, 0.5, 1e3);
        let one = build_plan(&g, 1, 1, PlanOptions::default()).unwrap();
        let t = task_costs(&one, &g, &CostParams::uniform(cluster.clone(), 2, 1)).unwrap();
        assert_eq!(t.tloss, vec![0.0]);
        let two = build_plan(&g, 2, 1, PlanOptions::default()).unwrap();
        let t = task_costs(&two, &g, &CostParams::uniform(cluster, 2, 1)).unwrap();
        // 2 · 32 B · 2 samples · 1/2 = 64 B
        assert_eq!(t.tloss, vec![0.5 + 64.0 / 1e3]);
    }

    #[test]
    fn total_cost_examples() {
        let t = TaskCostTable::from_parts(vec![vec![1.0, 2.0]], vec![vec![3.0, 4.0]], vec![]);
        assert_eq!(total_cost(&t), 10.0);
        let t = TaskCostTable::from_parts(vec![vec![0.0; 3]; 2], vec![vec![0.0; 3]; 2], vec![vec![0.0; 3]]);
        assert_eq!(total_cost(&t), 0.0);
        let t = TaskCostTable::from_parts(vec![vec![1.0], vec![0.0]], vec![vec![1.0], vec![0.0]], vec![vec![0.5]]);
        assert_eq!(total_cost(&t), 2.5);
    }

    #[test]
    fn total_cost_is_linear() {
        let t = TaskCostTable::from_parts(
            vec![vec![0.25, 1.5], vec![2.0, 0.125]],
            vec![vec![0.5, 3.0], vec![4.0, 0.25]],
            vec![vec![0.75, 0.0625]],
        );
        let scaled = TaskCostTable {
            tf: t.tf.iter().map(|r| r.iter().map(|x| x * 4.0).collect()).collect(),
            tb: t.tb.iter().map(|r| r.iter().map(|x| x * 4.0).collect()).collect(),
            tcomm: t.tcomm.iter().map(|r| r.iter().map(|x| x * 4.0).collect()).collect(),
            ..t.clone()
        };
        assert_eq!(total_cost(&scaled), 4.0 * total_cost(&t));
    }

    #[test]
    fn empty_microbatch_rejected() {
        let g = one_layer(8);
        let plan = build_plan(&g, 1, 1, PlanOptions::default()).unwrap();
        let mut params = CostParams::uniform(ClusterSpec::uniform(1, 1.0, 1, 0.0, 1.0), 1, 2);
        params.microbatch_samples[1] = 0;
        assert_eq!(
            task_costs(&plan, &g, &params),
            Err(CostError::EmptyMicrobatch { index: 2 })
        );
    }
}
