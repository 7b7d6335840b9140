//! Search over sub-module spans and merge choices.
//!
//! A candidate plan is identified by its sub-module count `Z`, the cut
//! positions between sub-modules, and which boundaries are `direct`. Small
//! spaces are enumerated exhaustively; larger ones are searched greedily
//! from a balanced starting plan.

use crate::cost::{breakdown, task_costs, total_cost, CostBreakdown, CostError, CostParams};
use crate::model::{ClusterSpec, ModelGraph};
use crate::partition::{build_plan, spans_from_cuts, BoundaryComm, PartitionPlan, PlanError, PlanOptions};
use serde::Serialize;
use thiserror::Error;

/// Spaces with at most this many candidates are searched exhaustively.
pub const EXHAUSTIVE_LIMIT: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("device count must be at least 1")]
    NoDevices,
    #[error("search budget must be at least 1")]
    ZeroBudget,
    #[error("cluster has {have} devices, plan needs {need}")]
    ClusterTooSmall { have: usize, need: usize },
    #[error("objective evaluation failed: {0}")]
    Objective(String),
}

/// Scores a candidate plan; lower is better.
pub trait PlanObjective {
    fn evaluate(&self, plan: &PartitionPlan, g: &ModelGraph, params: &CostParams) -> Result<f64, OptimizeError>;
}

/// Summed task seconds, communication included.
#[derive(Debug, Clone, Copy, Default)]
pub struct TotalCost;

impl PlanObjective for TotalCost {
    fn evaluate(&self, plan: &PartitionPlan, g: &ModelGraph, params: &CostParams) -> Result<f64, OptimizeError> {
        Ok(total_cost(&task_costs(plan, g, params)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub cluster: ClusterSpec,
    pub n: usize,
    pub microbatch_samples: Vec<u64>,
    pub overlap_comm: bool,
    /// Maximum objective evaluations of the greedy search.
    pub budget: usize,
    /// Upper bound on `Z`; defaults to `2n`.
    pub zmax: Option<usize>,
    pub plan_options: PlanOptions,
}

impl OptimizeConfig {
    pub fn new(cluster: ClusterSpec, n: usize, microbatch_samples: Vec<u64>) -> Self {
        Self {
            cluster,
            n,
            microbatch_samples,
            overlap_comm: false,
            budget: 10_000,
            zmax: None,
            plan_options: PlanOptions::default(),
        }
    }

    pub fn cost_params(&self) -> CostParams {
        CostParams {
            cluster: self.cluster.clone(),
            microbatch_samples: self.microbatch_samples.clone(),
            overlap_comm: self.overlap_comm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerReport {
    pub search: SearchKind,
    /// Size of the whole candidate space.
    pub candidate_space: u64,
    pub candidates_evaluated: usize,
    pub plan: PartitionPlan,
    pub objective: f64,
    pub breakdown: CostBreakdown,
}

impl OptimizerReport {
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            search: SearchKind,
            candidate_space: u64,
            candidates_evaluated: usize,
            objective: f64,
            breakdown: &'a CostBreakdown,
            z: usize,
            merges: usize,
            plan: serde_json::Value,
        }
        let plan: serde_json::Value = serde_json::from_str(&self.plan.to_json()).expect("plan serializes to JSON");
        let doc = Doc {
            search: self.search,
            candidate_space: self.candidate_space,
            candidates_evaluated: self.candidates_evaluated,
            objective: self.objective,
            breakdown: &self.breakdown,
            z: self.plan.z(),
            merges: self.plan.merge_count(),
            plan,
        };
        serde_json::to_string_pretty(&doc).expect("report serializes to JSON")
    }
}

/// A point of the search space, ordered by `(Z, cuts, direct)` with
/// `concat` before `direct`. The order is the search's tie-break.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Candidate {
    pub z: usize,
    /// Layer ids after which a new sub-module starts.
    pub cuts: Vec<usize>,
    /// Per boundary, whether it is `direct`.
    pub direct: Vec<bool>,
}

impl Candidate {
    fn from_plan(plan: &PartitionPlan) -> Self {
        Self {
            z: plan.z(),
            cuts: plan.submodules[..plan.z() - 1].iter().map(|s| s.last_layer).collect(),
            direct: plan.boundaries.iter().map(|b| *b == BoundaryComm::Direct).collect(),
        }
    }

    /// The plan this candidate describes, with every layer split over
    /// devices `1..=n`.
    pub fn to_plan(&self, g: &ModelGraph, n: usize, opts: PlanOptions) -> Result<PartitionPlan, PlanError> {
        let spans = spans_from_cuts(g.len(), &self.cuts);
        let all: Vec<usize> = (1..=n).collect();
        let mut plan = PartitionPlan::from_spans(g, &spans, &vec![all; spans.len()], opts)?;
        for (slot, &d) in plan.boundaries.iter_mut().zip(&self.direct) {
            if d {
                *slot = BoundaryComm::Direct;
            }
        }
        if self.direct.iter().any(|&d| d) {
            plan.provenance.push("boundary kinds chosen by optimizer".to_string());
        }
        Ok(plan)
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    (0..k.min(n - k)).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Number of candidates with `1 ≤ Z ≤ zmax` for `layers` layers.
pub fn candidate_count(layers: usize, zmax: usize) -> u64 {
    (1..=zmax.min(layers) as u64)
        .map(|z| binomial(layers as u64 - 1, z - 1).saturating_mul(1u64 << (z - 1).min(63)))
        .fold(0u64, u64::saturating_add)
}

/// Every candidate in search order.
pub fn enumerate_candidates(layers: usize, zmax: usize) -> Vec<Candidate> {
    let mut out = Vec::new();
    for z in 1..=zmax.min(layers) {
        let mut cuts: Vec<usize> = (1..z).collect();
        loop {
            for mask in 0u64..(1u64 << (z - 1)) {
                let direct = (0..z - 1).map(|k| mask >> (z - 2 - k) & 1 == 1).collect();
                out.push(Candidate {
                    z,
                    cuts: cuts.clone(),
                    direct,
                });
            }
            if !next_combination(&mut cuts, layers - 1) {
                break;
            }
        }
    }
    out
}

// next lexicographic k-subset of 1..=max, in place
fn next_combination(c: &mut [usize], max: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < max - (k - 1 - i) {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Finds the plan minimizing `objective`.
pub fn optimize_plan(
    g: &ModelGraph,
    cfg: &OptimizeConfig,
    objective: &dyn PlanObjective,
) -> Result<OptimizerReport, OptimizeError> {
    if cfg.n == 0 {
        return Err(OptimizeError::NoDevices);
    }
    if cfg.budget == 0 {
        return Err(OptimizeError::ZeroBudget);
    }
    if cfg.cluster.devices.len() < cfg.n {
        return Err(OptimizeError::ClusterTooSmall {
            have: cfg.cluster.devices.len(),
            need: cfg.n,
        });
    }
    // every candidate splits every layer the same way, so feasibility is
    // decided once
    build_plan(g, cfg.n, 1, cfg.plan_options)?;

    let params = cfg.cost_params();
    let zmax = cfg.zmax.unwrap_or(2 * cfg.n).max(1);
    let space = candidate_count(g.len(), zmax);
    let evaluated = std::cell::Cell::new(0usize);
    let score = |c: &Candidate| -> Result<(f64, PartitionPlan), OptimizeError> {
        let plan = c.to_plan(g, cfg.n, cfg.plan_options)?;
        evaluated.set(evaluated.get() + 1);
        Ok((objective.evaluate(&plan, g, &params)?, plan))
    };

    let (search, best_value, best_plan) = if space <= EXHAUSTIVE_LIMIT {
        let mut best: Option<(f64, PartitionPlan)> = None;
        for c in enumerate_candidates(g.len(), zmax) {
            let (v, plan) = score(&c)?;
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, plan));
            }
        }
        let (v, p) = best.expect("candidate space is never empty");
        (SearchKind::Exhaustive, v, p)
    } else {
        let start = build_plan(g, cfg.n, cfg.n.min(g.len()).min(zmax), cfg.plan_options)?;
        let mut current = Candidate::from_plan(&start);
        let (mut value, mut plan) = score(&current)?;
        'search: loop {
            let mut improved: Option<(f64, Candidate, PartitionPlan)> = None;
            for c in neighbors(&current, g.len(), zmax) {
                if evaluated.get() >= cfg.budget {
                    if let Some((v, _, p)) = improved {
                        (value, plan) = (v, p);
                    }
                    break 'search;
                }
                let (v, p) = score(&c)?;
                let bar = improved.as_ref().map_or(value, |(b, _, _)| *b);
                if v < bar {
                    improved = Some((v, c, p));
                }
            }
            match improved {
                Some((v, c, p)) => (value, current, plan) = (v, c, p),
                None => break,
            }
        }
        (SearchKind::Greedy, value, plan)
    };

    let table = task_costs(&best_plan, g, &params)?;
    Ok(OptimizerReport {
        search,
        candidate_space: space,
        candidates_evaluated: evaluated.get(),
        breakdown: breakdown(&table),
        objective: best_value,
        plan: best_plan,
    })
}

/// Plans one move away: merge a `concat` boundary, shift a cut by one layer,
/// or drop a cut. Returned in search order.
fn neighbors(c: &Candidate, layers: usize, zmax: usize) -> Vec<Candidate> {
    let mut out = Vec::new();
    for k in 0..c.cuts.len() {
        if !c.direct[k] {
            let mut next = c.clone();
            next.direct[k] = true;
            out.push(next);
        }
        let lo = if k == 0 { 1 } else { c.cuts[k - 1] + 1 };
        let hi = if k + 1 == c.cuts.len() {
            layers - 1
        } else {
            c.cuts[k + 1] - 1
        };
        for cut in [c.cuts[k].wrapping_sub(1), c.cuts[k] + 1] {
            if (lo..=hi).contains(&cut) {
                let mut next = c.clone();
                next.cuts[k] = cut;
                out.push(next);
            }
        }
        let mut fused = c.clone();
        fused.cuts.remove(k);
        fused.direct.remove(k);
        fused.z -= 1;
        out.push(fused);
    }
    out.retain(|n| n.z <= zmax);
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(layers: usize) -> ModelGraph {
        ModelGraph::dense_chain("u", &vec![8; layers + 1])
            .unwrap()
            .default_costs(4)
    }

    #[test]
    fn candidate_counts() {
        assert_eq!(candidate_count(1, 2), 1);
        assert_eq!(candidate_count(4, 8), 27);
        assert_eq!(enumerate_candidates(4, 8).len(), 27);
        assert_eq!(enumerate_candidates(6, 3).len() as u64, candidate_count(6, 3));
    }

    #[test]
    fn enumeration_is_sorted_and_unique() {
        let all = enumerate_candidates(5, 4);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_device_gives_trivial_plan() {
        let g = uniform(2);
        let cluster = ClusterSpec::uniform(1, 64.0, 1 << 30, 0.0, 1e9);
        let r = optimize_plan(&g, &OptimizeConfig::new(cluster, 1, vec![1]), &TotalCost).unwrap();
        assert_eq!(r.plan.z(), 1);
        let flops: u64 = g.layers().iter().map(|l| l.fwd_flops + l.bwd_flops).sum();
        assert_eq!(r.objective, flops as f64 / 64.0);
    }

    #[test]
    fn high_latency_merges_everything() {
        let g = uniform(4);
        let cluster = ClusterSpec::uniform(2, 1e3, 1 << 30, 1e3, 1e9);
        let r = optimize_plan(&g, &OptimizeConfig::new(cluster, 2, vec![2, 2]), &TotalCost).unwrap();
        assert_eq!(r.search, SearchKind::Exhaustive);
        assert!(r.plan.boundaries.iter().all(|b| *b == BoundaryComm::Direct));
    }

    #[test]
    fn narrow_layer_is_infeasible() {
        let g = ModelGraph::dense_chain("n", &[4, 1, 4]).unwrap().default_costs(4);
        let cluster = ClusterSpec::uniform(2, 1.0, 1 << 30, 0.0, 1e9);
        let err = optimize_plan(&g, &OptimizeConfig::new(cluster, 2, vec![1]), &TotalCost).unwrap_err();
        assert!(matches!(err, OptimizeError::Plan(PlanError::TooNarrow { .. })));
    }

    #[test]
    fn greedy_beats_its_start_within_budget() {
        let g = uniform(12);
        let cluster = ClusterSpec::uniform(4, 1e6, 1 << 30, 1e-2, 1e6);
        let mut cfg = OptimizeConfig::new(cluster, 4, vec![1; 4]);
        cfg.budget = 50;
        let r = optimize_plan(&g, &cfg, &TotalCost).unwrap();
        assert_eq!(r.search, SearchKind::Greedy);
        assert!(r.candidates_evaluated <= 50);
        let start = build_plan(&g, 4, 4, PlanOptions::default()).unwrap();
        let base = TotalCost.evaluate(&start, &g, &cfg.cost_params()).unwrap();
        assert!(r.objective <= base);
    }

    #[test]
    fn neighbors_stay_in_range() {
        let c = Candidate {
            z: 3,
            cuts: vec![1, 2],
            direct: vec![false, true],
        };
        for n in neighbors(&c, 4, 8) {
            assert_eq!(n.cuts.len() + 1, n.z);
            assert!(n.cuts.windows(2).all(|w| w[0] < w[1]));
            assert!(n.cuts.iter().all(|&x| (1..4).contains(&x)));
        }
    }
}
