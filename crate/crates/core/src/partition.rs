//! Layer-wise partitioning and sub-module merging.
//!
//! Every layer is split along its output units into one shard per device.
//! Consecutive sharded layers are grouped into `Z` contiguous sub-modules.
//! Between two sub-modules the per-device outputs are either concatenated and
//! re-partitioned (`concat`) or, once the pair has been merged, handed over
//! directly (`direct`).

use crate::doc::{self, ParseError};
use crate::model::{ClusterSpec, LayerSpec, ModelGraph};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use thiserror::Error;

/// One device's slice `[lo, hi)` of a layer's output units.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shard {
    pub layer_id: usize,
    pub device_id: usize,
    pub range: Range<usize>,
}

impl Shard {
    pub fn width(&self) -> usize {
        self.range.end - self.range.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryComm {
    /// Outputs are gathered, concatenated and re-partitioned.
    #[serde(rename = "concat")]
    ConcatRepartition,
    /// Outputs flow straight into the next sub-module.
    #[serde(rename = "direct")]
    Direct,
}

impl fmt::Display for BoundaryComm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryComm::ConcatRepartition => "concat",
            BoundaryComm::Direct => "direct",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubModule {
    /// 1-based position among the sub-modules.
    pub index: usize,
    pub first_layer: usize,
    pub last_layer: usize,
    /// Participating devices, ascending.
    pub devices: Vec<usize>,
    /// Shards ordered by layer, then by device.
    pub shards: Vec<Shard>,
}

impl SubModule {
    pub fn layer_ids(&self) -> std::ops::RangeInclusive<usize> {
        self.first_layer..=self.last_layer
    }

    /// Shards of one layer in device order.
    pub fn layer_shards(&self, layer_id: usize) -> impl Iterator<Item = &Shard> {
        self.shards.iter().filter(move |s| s.layer_id == layer_id)
    }

    /// The partition `z_i` held by one device.
    pub fn device_shards(&self, device_id: usize) -> impl Iterator<Item = &Shard> {
        self.shards.iter().filter(move |s| s.device_id == device_id)
    }

    pub fn shard(&self, layer_id: usize, device_id: usize) -> Option<&Shard> {
        self.shards
            .iter()
            .find(|s| s.layer_id == layer_id && s.device_id == device_id)
    }
}

/// Fraction of a layer's work that a shard carries: its share of the output
/// units, or the whole layer when the layer is replicated.
pub fn shard_share(shard: &Shard, layer: &LayerSpec, replicated: bool) -> f64 {
    if replicated {
        1.0
    } else {
        shard.width() as f64 / layer.fan_out as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlanOptions {
    /// Replicate layers narrower than the device count instead of failing.
    pub replicate_narrow: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("layer {layer} too narrow to split {n} ways (fan_out {fan_out})")]
    TooNarrow { layer: usize, fan_out: usize, n: usize },
    #[error("device count must be at least 1")]
    NoDevices,
    #[error("sub-module count must be at least 1")]
    ZeroSubmodules,
    #[error("Z exceeds layer count ({z} > {layers})")]
    ZExceedsLayers { z: usize, layers: usize },
    #[error("group must be contiguous")]
    GroupNotContiguous,
    #[error("group must name at least two sub-modules")]
    GroupTooSmall,
    #[error("sub-module {index} out of range 1..={z}")]
    GroupOutOfRange { index: usize, z: usize },
    #[error("plan references device {device}, which is not in the cluster")]
    UnknownDevice { device: usize },
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    /// Number of devices the plan spans.
    pub n: usize,
    pub submodules: Vec<SubModule>,
    /// `boundaries[k]` sits between sub-modules `k+1` and `k+2`.
    pub boundaries: Vec<BoundaryComm>,
    /// Human-readable log of merges applied to the plan.
    pub provenance: Vec<String>,
}

/// Splits a layer's output units into `n` balanced shards, shard `k` on
/// device `k`. Sizes differ by at most one, larger shards first.
pub fn split_layer(layer: &LayerSpec, n: usize) -> Result<Vec<Shard>, PlanError> {
    let devices: Vec<usize> = (1..=n).collect();
    split_over(layer, &devices)
}

fn split_over(layer: &LayerSpec, devices: &[usize]) -> Result<Vec<Shard>, PlanError> {
    let n = devices.len();
    if n == 0 {
        return Err(PlanError::NoDevices);
    }
    if n > layer.fan_out {
        return Err(PlanError::TooNarrow {
            layer: layer.id,
            fan_out: layer.fan_out,
            n,
        });
    }
    let base = layer.fan_out / n;
    let extra = layer.fan_out % n;
    let mut lo = 0;
    Ok(devices
        .iter()
        .enumerate()
        .map(|(k, &device_id)| {
            let width = base + usize::from(k < extra);
            let shard = Shard {
                layer_id: layer.id,
                device_id,
                range: lo..lo + width,
            };
            lo += width;
            shard
        })
        .collect())
}

fn shards_for(layer: &LayerSpec, devices: &[usize], opts: PlanOptions) -> Result<Vec<Shard>, PlanError> {
    match split_over(layer, devices) {
        Err(PlanError::TooNarrow { .. }) if opts.replicate_narrow => Ok(devices
            .iter()
            .map(|&device_id| Shard {
                layer_id: layer.id,
                device_id,
                range: 0..layer.fan_out,
            })
            .collect()),
        other => other,
    }
}

/// Contiguous spans `(first, last)` of 1-based layer ids balancing summed
/// forward flops. Each cut is placed greedily at the prefix sum closest to
/// `k/Z` of the total; ties go to the earlier cut.
pub fn balanced_spans(g: &ModelGraph, z: usize) -> Result<Vec<(usize, usize)>, PlanError> {
    let l = g.len();
    if z == 0 {
        return Err(PlanError::ZeroSubmodules);
    }
    if z > l {
        return Err(PlanError::ZExceedsLayers { z, layers: l });
    }
    let mut prefix = vec![0u128; l + 1];
    for (i, layer) in g.layers().iter().enumerate() {
        prefix[i + 1] = prefix[i] + layer.fwd_flops as u128;
    }
    let total = prefix[l];
    let mut cuts = Vec::with_capacity(z - 1);
    let mut prev = 0;
    for k in 1..z {
        // compare |prefix·Z − total·k| to stay in integers
        let target = total * k as u128;
        let best = (prev + 1..=l - (z - k))
            .min_by_key(|&c| (prefix[c] * z as u128).abs_diff(target))
            .expect("non-empty cut range");
        cuts.push(best);
        prev = best;
    }
    Ok(spans_from_cuts(l, &cuts))
}

/// Spans from cut positions, where a cut `c` ends a span after layer `c`.
pub fn spans_from_cuts(layers: usize, cuts: &[usize]) -> Vec<(usize, usize)> {
    let mut spans = Vec::with_capacity(cuts.len() + 1);
    let mut first = 1;
    for &c in cuts {
        spans.push((first, c));
        first = c + 1;
    }
    spans.push((first, layers));
    spans
}

/// Splits every layer over all `n` devices and groups the layers into `z`
/// flop-balanced sub-modules with every boundary set to `concat`.
pub fn build_plan(g: &ModelGraph, n: usize, z: usize, opts: PlanOptions) -> Result<PartitionPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::NoDevices);
    }
    let spans = balanced_spans(g, z)?;
    let all: Vec<usize> = (1..=n).collect();
    let groups = vec![all; spans.len()];
    PartitionPlan::from_spans(g, &spans, &groups, opts)
}

impl PartitionPlan {
    /// Builds a plan from explicit spans and per-sub-module device groups.
    /// `build_plan` uses every device for every sub-module; other groupings
    /// (one device per sub-module, for instance) describe stage pipelines.
    pub fn from_spans(
        g: &ModelGraph,
        spans: &[(usize, usize)],
        groups: &[Vec<usize>],
        opts: PlanOptions,
    ) -> Result<PartitionPlan, PlanError> {
        if spans.is_empty() {
            return Err(PlanError::ZeroSubmodules);
        }
        if spans.len() != groups.len() {
            return Err(PlanError::Invalid(format!(
                "{} spans but {} device groups",
                spans.len(),
                groups.len()
            )));
        }
        let mut submodules = Vec::with_capacity(spans.len());
        let mut all_devices = BTreeSet::new();
        for (idx, (&(first, last), group)) in spans.iter().zip(groups).enumerate() {
            let mut devices = group.clone();
            devices.sort_unstable();
            devices.dedup();
            if devices.is_empty() {
                return Err(PlanError::NoDevices);
            }
            all_devices.extend(devices.iter().copied());
            let mut shards = Vec::new();
            for layer_id in first..=last {
                let layer = g
                    .layer(layer_id)
                    .ok_or_else(|| PlanError::Invalid(format!("span references missing layer {layer_id}")))?;
                shards.extend(shards_for(layer, &devices, opts)?);
            }
            submodules.push(SubModule {
                index: idx + 1,
                first_layer: first,
                last_layer: last,
                devices,
                shards,
            });
        }
        let plan = PartitionPlan {
            n: all_devices.len(),
            boundaries: vec![BoundaryComm::ConcatRepartition; submodules.len() - 1],
            submodules,
            provenance: Vec::new(),
        };
        plan.validate(g, None)?;
        Ok(plan)
    }

    /// Sub-module count, `Z`.
    pub fn z(&self) -> usize {
        self.submodules.len()
    }

    pub fn devices(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.submodules.iter().flat_map(|s| s.devices.iter().copied()).collect();
        set.into_iter().collect()
    }

    /// Number of `direct` boundaries.
    pub fn merge_count(&self) -> usize {
        self.boundaries.iter().filter(|b| **b == BoundaryComm::Direct).count()
    }

    /// Sub-module holding a layer.
    pub fn submodule_of(&self, layer_id: usize) -> Option<&SubModule> {
        self.submodules
            .iter()
            .find(|s| (s.first_layer..=s.last_layer).contains(&layer_id))
    }

    /// Whether a layer is held in full by each of several devices.
    pub fn is_replicated(&self, g: &ModelGraph, layer_id: usize) -> bool {
        let (Some(sub), Some(layer)) = (self.submodule_of(layer_id), g.layer(layer_id)) else {
            return false;
        };
        sub.devices.len() > 1 && sub.layer_shards(layer_id).all(|s| s.range == (0..layer.fan_out))
    }

    /// Reclassifies the boundaries inside a contiguous group of sub-modules
    /// (1-based indices) as `direct`.
    pub fn merge_submodules(&self, group: &[usize]) -> Result<PartitionPlan, PlanError> {
        if group.len() < 2 {
            return Err(PlanError::GroupTooSmall);
        }
        let z = self.z();
        for &index in group {
            if index == 0 || index > z {
                return Err(PlanError::GroupOutOfRange { index, z });
            }
        }
        if group.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(PlanError::GroupNotContiguous);
        }
        let mut out = self.clone();
        let mut changed = false;
        for k in group[0]..group[group.len() - 1] {
            let slot = &mut out.boundaries[k - 1];
            if *slot != BoundaryComm::Direct {
                *slot = BoundaryComm::Direct;
                changed = true;
            }
        }
        if changed {
            out.provenance
                .push(format!("merged sub-modules {}..={}", group[0], group[group.len() - 1]));
        }
        Ok(out)
    }

    /// Whether the shards producing boundary `k`'s activation (the last
    /// layer of sub-module `k`, 1-based) match the balanced layout the next
    /// sub-module's devices expect for their input.
    pub fn boundary_layout_matches(&self, k: usize) -> bool {
        let producer = &self.submodules[k - 1];
        let consumer = &self.submodules[k];
        let actual: Vec<&Shard> = producer.layer_shards(producer.last_layer).collect();
        let fan_out = actual.iter().map(|s| s.range.end).max().unwrap_or(0);
        let mut layer = LayerSpec::dense(1, fan_out.max(1));
        layer.id = producer.last_layer;
        let expected = shards_for(&layer, &consumer.devices, PlanOptions { replicate_narrow: true })
            .expect("replication never fails");
        actual.len() == expected.len() && actual.iter().zip(&expected).all(|(a, e)| *a == e)
    }

    /// Whether boundary `k` (1-based) moves data: always for `concat`, and
    /// for `direct` when the layouts on either side differ.
    pub fn boundary_transfers(&self, k: usize) -> bool {
        self.boundaries[k - 1] == BoundaryComm::ConcatRepartition || !self.boundary_layout_matches(k)
    }

    /// Bytes crossing boundary `k` (1-based) for `samples` samples.
    pub fn boundary_volume(&self, g: &ModelGraph, k: usize, samples: u64) -> f64 {
        let n = self.n as f64;
        if self.n <= 1 {
            return 0.0;
        }
        let layer = g
            .layer(self.submodules[k - 1].last_layer)
            .expect("plan validated against model");
        let whole = layer.act_bytes as f64 * samples as f64;
        let spread = (n - 1.0) / n;
        match self.boundaries[k - 1] {
            // gather + scatter; each device already holds its own 1/n
            BoundaryComm::ConcatRepartition => 2.0 * whole * spread,
            BoundaryComm::Direct if self.boundary_layout_matches(k) => 0.0,
            BoundaryComm::Direct => whole * spread,
        }
    }

    /// Total bytes moved across all sub-module boundaries for `samples` samples.
    pub fn comm_volume(&self, g: &ModelGraph, samples: u64) -> f64 {
        (1..self.z()).map(|k| self.boundary_volume(g, k, samples)).sum()
    }

    /// Checks the plan's structural invariants against a model and,
    /// optionally, a cluster.
    pub fn validate(&self, g: &ModelGraph, cluster: Option<&ClusterSpec>) -> Result<(), PlanError> {
        let invalid = |msg: String| Err(PlanError::Invalid(msg));
        if self.submodules.is_empty() {
            return Err(PlanError::ZeroSubmodules);
        }
        if self.boundaries.len() != self.submodules.len() - 1 {
            return invalid(format!(
                "{} boundaries for {} sub-modules",
                self.boundaries.len(),
                self.submodules.len()
            ));
        }
        let mut expected_first = 1;
        for (idx, sub) in self.submodules.iter().enumerate() {
            if sub.index != idx + 1 {
                return invalid(format!("sub-module at position {} has index {}", idx + 1, sub.index));
            }
            if sub.first_layer != expected_first || sub.last_layer < sub.first_layer {
                return invalid(format!(
                    "sub-module {} span {}..={} does not continue at layer {expected_first}",
                    sub.index, sub.first_layer, sub.last_layer
                ));
            }
            if sub.devices.is_empty() || sub.devices.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!(
                    "sub-module {} device list must be ascending and non-empty",
                    sub.index
                ));
            }
            for layer_id in sub.layer_ids() {
                let Some(layer) = g.layer(layer_id) else {
                    return invalid(format!("sub-module {} references missing layer {layer_id}", sub.index));
                };
                let shards: Vec<&Shard> = sub.layer_shards(layer_id).collect();
                let owners: Vec<usize> = shards.iter().map(|s| s.device_id).collect();
                if owners != sub.devices {
                    return invalid(format!(
                        "layer {layer_id} must have exactly one shard per device of sub-module {}",
                        sub.index
                    ));
                }
                check_tiling(layer, &shards)?;
            }
            if sub
                .shards
                .iter()
                .any(|s| s.layer_id < sub.first_layer || s.layer_id > sub.last_layer)
            {
                return invalid(format!("sub-module {} holds shards outside its span", sub.index));
            }
            expected_first = sub.last_layer + 1;
        }
        if expected_first != g.len() + 1 {
            return invalid(format!(
                "sub-module spans cover layers 1..{expected_first}, model has {}",
                g.len()
            ));
        }
        let devices = self.devices();
        if devices.len() != self.n {
            return invalid(format!("plan declares n={} but uses {} devices", self.n, devices.len()));
        }
        if let Some(cluster) = cluster {
            for d in devices {
                if cluster.device(d).is_none() {
                    return Err(PlanError::UnknownDevice { device: d });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = PlanDoc {
            n: self.n,
            submodules: self
                .submodules
                .iter()
                .map(|s| SubModuleDoc {
                    span: [s.first_layer, s.last_layer],
                    shards: s
                        .shards
                        .iter()
                        .map(|sh| ShardDoc {
                            layer: sh.layer_id,
                            device: sh.device_id,
                            range: [sh.range.start, sh.range.end],
                        })
                        .collect(),
                })
                .collect(),
            boundaries: self.boundaries.clone(),
            provenance: self.provenance.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("plan document serializes")
    }

    /// Parses a plan document and validates it against `g`.
    pub fn from_json(text: &str, g: &ModelGraph) -> Result<PartitionPlan, PlanError> {
        let plan = Self::decode(text)?;
        plan.validate(g, None)?;
        Ok(plan)
    }

    /// Parses a plan document without checking it against a model.
    pub fn decode(text: &str) -> Result<PartitionPlan, PlanError> {
        let doc: PlanDoc = doc::from_json(text)?;
        let mut submodules = Vec::with_capacity(doc.submodules.len());
        for (idx, s) in doc.submodules.into_iter().enumerate() {
            let mut shards: Vec<Shard> = Vec::with_capacity(s.shards.len());
            for sh in s.shards {
                if sh.range[0] >= sh.range[1] {
                    return Err(PlanError::Invalid(format!(
                        "shard of layer {} on device {} has empty range [{}, {})",
                        sh.layer, sh.device, sh.range[0], sh.range[1]
                    )));
                }
                shards.push(Shard {
                    layer_id: sh.layer,
                    device_id: sh.device,
                    range: sh.range[0]..sh.range[1],
                });
            }
            shards.sort_by_key(|sh| (sh.layer_id, sh.device_id));
            let mut devices: Vec<usize> = shards.iter().map(|sh| sh.device_id).collect();
            devices.sort_unstable();
            devices.dedup();
            submodules.push(SubModule {
                index: idx + 1,
                first_layer: s.span[0],
                last_layer: s.span[1],
                devices,
                shards,
            });
        }
        Ok(PartitionPlan {
            n: doc.n,
            submodules,
            boundaries: doc.boundaries,
            provenance: doc.provenance,
        })
    }
}

fn check_tiling(layer: &LayerSpec, shards: &[&Shard]) -> Result<(), PlanError> {
    let full = 0..layer.fan_out;
    if shards.len() > 1 && shards.iter().all(|s| s.range == full) {
        return Ok(()); // replicated
    }
    let mut ranges: Vec<&Range<usize>> = shards.iter().map(|s| &s.range).collect();
    ranges.sort_by_key(|r| r.start);
    let mut next = 0;
    for r in ranges {
        if r.start != next || r.end <= r.start || r.end > layer.fan_out {
            return Err(PlanError::Invalid(format!(
                "shards of layer {} do not tile [0, {}) without overlap",
                layer.id, layer.fan_out
            )));
        }
        next = r.end;
    }
    if next != layer.fan_out {
        return Err(PlanError::Invalid(format!(
            "shards of layer {} cover only [0, {next}) of [0, {})",
            layer.id, layer.fan_out
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    n: usize,
    submodules: Vec<SubModuleDoc>,
    boundaries: Vec<BoundaryComm>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    provenance: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubModuleDoc {
    /// Inclusive 1-based layer ids.
    span: [usize; 2],
    shards: Vec<ShardDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShardDoc {
    layer: usize,
    device: usize,
    /// Half-open unit range.
    range: [usize; 2],
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(fan_out: usize) -> LayerSpec {
        LayerSpec {
            id: 1,
            ..LayerSpec::dense(4, fan_out)
        }
    }

    fn uniform(l: usize) -> ModelGraph {
        ModelGraph::dense_chain("u", &vec![8; l + 1]).unwrap().default_costs(4)
    }

    fn ranges(shards: &[Shard]) -> Vec<Range<usize>> {
        shards.iter().map(|s| s.range.clone()).collect()
    }

    #[test]
    fn split_examples() {
        assert_eq!(ranges(&split_layer(&dense(8), 2).unwrap()), vec![0..4, 4..8]);
        assert_eq!(ranges(&split_layer(&dense(7), 2).unwrap()), vec![0..4, 4..7]);
        assert_eq!(ranges(&split_layer(&dense(8), 1).unwrap()), vec![0..8]);
        let devices: Vec<usize> = split_layer(&dense(8), 3).unwrap().iter().map(|s| s.device_id).collect();
        assert_eq!(devices, vec![1, 2, 3]);
    }

    #[test]
    fn split_too_narrow() {
        let err = split_layer(&dense(2), 3).unwrap_err();
        assert!(err.to_string().contains("too narrow to split 3 ways"));
    }

    #[test]
    fn build_plan_examples() {
        let p = build_plan(&uniform(4), 2, 2, PlanOptions::default()).unwrap();
        let spans: Vec<_> = p.submodules.iter().map(|s| (s.first_layer, s.last_layer)).collect();
        assert_eq!(spans, vec![(1, 2), (3, 4)]);
        assert_eq!(p.boundaries, vec![BoundaryComm::ConcatRepartition]);

        let p = build_plan(&uniform(3), 2, 3, PlanOptions::default()).unwrap();
        assert_eq!(p.z(), 3);
        assert_eq!(p.boundaries.len(), 2);

        let err = build_plan(&uniform(2), 2, 3, PlanOptions::default()).unwrap_err();
        assert!(err.to_string().contains("Z exceeds layer count"));
    }

    #[test]
    fn balancing_follows_flops() {
        let mut layers: Vec<LayerSpec> = (0..4).map(|_| LayerSpec::dense(8, 8)).collect();
        for (l, f) in layers.iter_mut().zip([30, 10, 10, 10]) {
            l.fwd_flops = f;
        }
        let g = ModelGraph::new("skew", layers).unwrap();
        assert_eq!(balanced_spans(&g, 2).unwrap(), vec![(1, 1), (2, 4)]);
        // exact tie between cutting after layer 1 and after layer 2 goes early
        let mut layers: Vec<LayerSpec> = (0..3).map(|_| LayerSpec::dense(8, 8)).collect();
        for (l, f) in layers.iter_mut().zip([10, 20, 10]) {
            l.fwd_flops = f;
        }
        let g = ModelGraph::new("tie", layers).unwrap();
        assert_eq!(balanced_spans(&g, 2).unwrap(), vec![(1, 1), (2, 3)]);
    }

    #[test]
    fn narrow_layer_replication() {
        let g = ModelGraph::dense_chain("n", &[4, 2, 6]).unwrap().default_costs(4);
        assert!(build_plan(&g, 3, 1, PlanOptions::default()).is_err());
        let p = build_plan(&g, 3, 1, PlanOptions { replicate_narrow: true }).unwrap();
        assert!(p.is_replicated(&g, 1));
        assert!(!p.is_replicated(&g, 2));
        assert_eq!(p.submodules[0].layer_shards(1).count(), 3);
    }

    #[test]
    fn merge_examples() {
        let p = build_plan(&uniform(3), 2, 3, PlanOptions::default()).unwrap();
        let m = p.merge_submodules(&[1, 2]).unwrap();
        assert_eq!(
            m.boundaries,
            vec![BoundaryComm::Direct, BoundaryComm::ConcatRepartition]
        );
        let all = p.merge_submodules(&[1, 2, 3]).unwrap();
        assert_eq!(all.boundaries, vec![BoundaryComm::Direct; 2]);
        assert_eq!(all.z(), 3);
        assert_eq!(
            p.merge_submodules(&[1, 3]).unwrap_err().to_string(),
            "group must be contiguous"
        );
        assert!(matches!(
            p.merge_submodules(&[3, 4]),
            Err(PlanError::GroupOutOfRange { index: 4, .. })
        ));
        assert_eq!(p.merge_submodules(&[2]).unwrap_err(), PlanError::GroupTooSmall);
    }

    #[test]
    fn merge_is_idempotent() {
        let p = build_plan(&uniform(3), 2, 3, PlanOptions::default()).unwrap();
        let once = p.merge_submodules(&[1, 2]).unwrap();
        assert_eq!(once.merge_submodules(&[1, 2]).unwrap(), once);
    }

    #[test]
    fn comm_volume_examples() {
        let g = ModelGraph::dense_chain("c", &[4, 8, 8]).unwrap().default_costs(4);
        let single = build_plan(&g, 1, 2, PlanOptions::default()).unwrap();
        assert_eq!(single.comm_volume(&g, 7), 0.0);

        let p = build_plan(&g, 2, 2, PlanOptions::default()).unwrap();
        assert_eq!(g.layer(1).unwrap().act_bytes, 32);
        assert_eq!(p.comm_volume(&g, 1), 32.0);
        let merged = p.merge_submodules(&[1, 2]).unwrap();
        assert_eq!(merged.comm_volume(&g, 1), 0.0);
    }

    #[test]
    fn direct_boundary_with_mismatched_layout_pays_handoff() {
        let g = ModelGraph::dense_chain("s", &[4, 8, 8]).unwrap().default_costs(4);
        let p = PartitionPlan::from_spans(&g, &[(1, 1), (2, 2)], &[vec![1], vec![2]], PlanOptions::default())
            .unwrap()
            .merge_submodules(&[1, 2])
            .unwrap();
        assert!(!p.boundary_layout_matches(1));
        assert_eq!(p.comm_volume(&g, 1), 16.0);
    }

    #[test]
    fn plan_document_roundtrip_and_validation() {
        let g = uniform(4);
        let p = build_plan(&g, 3, 2, PlanOptions::default())
            .unwrap()
            .merge_submodules(&[1, 2])
            .unwrap();
        let text = p.to_json();
        assert_eq!(PartitionPlan::from_json(&text, &g).unwrap(), p);

        let broken = text.replacen("\"direct\"", "\"concat\", \"direct\"", 1);
        assert!(matches!(
            PartitionPlan::from_json(&broken, &g),
            Err(PlanError::Invalid(_))
        ));

        let mut gap = p.clone();
        gap.submodules[0].shards[0].range = 1..3;
        assert!(PartitionPlan::from_json(&gap.to_json(), &g).is_err());
    }

    #[test]
    fn validate_checks_cluster_devices() {
        let g = uniform(2);
        let p = build_plan(&g, 3, 1, PlanOptions::default()).unwrap();
        let small = ClusterSpec::uniform(2, 1.0, 1, 0.0, 1.0);
        assert_eq!(
            p.validate(&g, Some(&small)),
            Err(PlanError::UnknownDevice { device: 3 })
        );
        assert!(p.validate(&g, Some(&ClusterSpec::uniform(3, 1.0, 1, 0.0, 1.0))).is_ok());
    }

    #[test]
    fn build_plan_is_deterministic() {
        let g = uniform(7);
        assert_eq!(
            build_plan(&g, 3, 4, PlanOptions::default()).unwrap(),
            build_plan(&g, 3, 4, PlanOptions::default()).unwrap()
        );
    }
}
