//! Abstract model and cluster descriptions.
//!
//! A model is a linear chain of layers. Each layer carries its dimensions and
//! per-sample cost figures; dense layers can have their costs derived from
//! their shape with [`ModelGraph::default_costs`], anything else (convolutions,
//! attention blocks, ...) is described as a `generic` layer with explicit costs.
//!
//! The cluster is a set of devices joined by a uniform all-pairs link with a
//! fixed per-message latency and a bandwidth.

use crate::doc::{self, ParseError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

/// Only schema version understood by [`ModelGraph::from_json`].
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    /// 1-based position in the chain.
    pub id: usize,
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub param_count: u64,
    /// Forward floating-point operations per sample.
    pub fwd_flops: u64,
    /// Backward floating-point operations per sample.
    pub bwd_flops: u64,
    /// Bytes of output activation per sample.
    pub act_bytes: u64,
}

impl LayerSpec {
    /// A dense layer with all cost fields left at zero.
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        Self {
            id: 0,
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
            param_count: 0,
            fwd_flops: 0,
            bwd_flops: 0,
            act_bytes: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("unsupported model schema version {0} (expected {MODEL_SCHEMA_VERSION})")]
    UnsupportedSchema(u32),
    #[error("model must have at least one layer")]
    Empty,
    #[error("layer {layer}: {field} must be at least 1")]
    ZeroWidth { layer: usize, field: &'static str },
    #[error(
        "dimension mismatch between layers {prev} and {next}: layer {prev} fan_out {prev_fan_out} != layer {next} fan_in {next_fan_in}"
    )]
    DimensionMismatch {
        prev: usize,
        next: usize,
        prev_fan_out: usize,
        next_fan_in: usize,
    },
}

/// An ordered chain of layers, validated on construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    name: String,
    layers: Vec<LayerSpec>,
}

impl ModelGraph {
    /// Validates the chain and renumbers layer ids to `1..=L`.
    pub fn new(name: impl Into<String>, mut layers: Vec<LayerSpec>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Empty);
        }
        for (idx, layer) in layers.iter_mut().enumerate() {
            layer.id = idx + 1;
            if layer.fan_in == 0 {
                return Err(ModelError::ZeroWidth {
                    layer: layer.id,
                    field: "fan_in",
                });
            }
            if layer.fan_out == 0 {
                return Err(ModelError::ZeroWidth {
                    layer: layer.id,
                    field: "fan_out",
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(ModelError::DimensionMismatch {
                    prev: pair[0].id,
                    next: pair[1].id,
                    prev_fan_out: pair[0].fan_out,
                    next_fan_in: pair[1].fan_in,
                });
            }
        }
        Ok(Self {
            name: name.into(),
            layers,
        })
    }

    /// Chain of dense layers through the given widths, e.g. `[4, 8, 3]` is
    /// two layers 4→8→3. Costs are left at zero.
    pub fn dense_chain(name: impl Into<String>, widths: &[usize]) -> Result<Self, ModelError> {
        let layers = widths.windows(2).map(|w| LayerSpec::dense(w[0], w[1])).collect();
        Self::new(name, layers)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of layers, `L`.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layer by 1-based id.
    pub fn layer(&self, id: usize) -> Option<&LayerSpec> {
        id.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    /// Total parameter dimensionality, the sum of per-layer parameter counts.
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    /// Fills zero cost fields from layer shapes.
    ///
    /// Dense layers get `2·in·out` forward flops, `4·in·out` backward flops,
    /// `out·bytes_per_unit` activation bytes and `in·out + out` parameters.
    /// Generic layers only get `bwd_flops = 2·fwd_flops` when the backward
    /// cost is missing. Fields that are already nonzero are kept.
    pub fn default_costs(&self, bytes_per_unit: u64) -> ModelGraph {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let mut out = layer.clone();
                let area = (layer.fan_in as u64) * (layer.fan_out as u64);
                match layer.kind {
                    LayerKind::Dense => {
                        fill(&mut out.fwd_flops, 2 * area);
                        fill(&mut out.bwd_flops, 4 * area);
                        fill(&mut out.act_bytes, layer.fan_out as u64 * bytes_per_unit);
                        fill(&mut out.param_count, area + layer.fan_out as u64);
                    }
                    LayerKind::Generic => fill(&mut out.bwd_flops, 2 * layer.fwd_flops),
                }
                out
            })
            .collect();
        ModelGraph {
            name: self.name.clone(),
            layers,
        }
    }

    /// Parses a model document (see the crate README for the schema).
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDoc = doc::from_json(text)?;
        if doc.schema != MODEL_SCHEMA_VERSION {
            return Err(ModelError::UnsupportedSchema(doc.schema));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| LayerSpec {
                id: 0,
                kind: l.kind,
                fan_in: l.fan_in,
                fan_out: l.fan_out,
                param_count: l.param_count.unwrap_or(0),
                fwd_flops: l.fwd_flops.unwrap_or(0),
                bwd_flops: l.bwd_flops.unwrap_or(0),
                act_bytes: l.act_bytes.unwrap_or(0),
            })
            .collect();
        Self::new(doc.name, layers)
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            schema: MODEL_SCHEMA_VERSION,
            name: self.name.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    kind: l.kind,
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                    param_count: Some(l.param_count),
                    fwd_flops: Some(l.fwd_flops),
                    bwd_flops: Some(l.bwd_flops),
                    act_bytes: Some(l.act_bytes),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("model document serializes")
    }
}

fn fill(slot: &mut u64, value: u64) {
    if *slot == 0 {
        *slot = value;
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    schema: u32,
    #[serde(default)]
    name: String,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    kind: LayerKind,
    fan_in: usize,
    fan_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    param_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fwd_flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bwd_flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    /// 1-based device id.
    pub id: usize,
    pub flops_per_sec: f64,
    pub mem_bytes: u64,
}

/// Devices plus a uniform alpha–beta link between every pair of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub devices: Vec<DeviceSpec>,
    pub link_latency_s: f64,
    pub link_bandwidth_bps: f64,
}

/// One violated cluster invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum ClusterIssue {
    NoDevices,
    NonPositiveThroughput { device: usize },
    NonPositiveMemory { device: usize },
    DeviceIdOutOfRange { device: usize, count: usize },
    DuplicateDevice { device: usize },
    NegativeLatency,
    NonPositiveBandwidth,
}

impl fmt::Display for ClusterIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterIssue::NoDevices => write!(f, "cluster must have at least one device"),
            ClusterIssue::NonPositiveThroughput { device } => {
                write!(f, "device {device}: flops_per_sec must be positive")
            }
            ClusterIssue::NonPositiveMemory { device } => {
                write!(f, "device {device}: mem_bytes must be positive")
            }
            ClusterIssue::DeviceIdOutOfRange { device, count } => {
                write!(f, "device id {device} outside 1..={count}")
            }
            ClusterIssue::DuplicateDevice { device } => write!(f, "duplicate device id {device}"),
            ClusterIssue::NegativeLatency => write!(f, "latency must be non-negative"),
            ClusterIssue::NonPositiveBandwidth => write!(f, "bandwidth must be positive"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid cluster: {}", join_issues(.0))]
    Invalid(Vec<ClusterIssue>),
}

fn join_issues(issues: &[ClusterIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

/// Checks every device and link invariant and reports all violations.
pub fn validate_cluster(cluster: &ClusterSpec) -> Result<(), Vec<ClusterIssue>> {
    let mut issues = Vec::new();
    if cluster.devices.is_empty() {
        issues.push(ClusterIssue::NoDevices);
    }
    let count = cluster.devices.len();
    let mut seen = BTreeSet::new();
    for dev in &cluster.devices {
        if !seen.insert(dev.id) {
            issues.push(ClusterIssue::DuplicateDevice { device: dev.id });
        }
        if dev.id == 0 || dev.id > count {
            issues.push(ClusterIssue::DeviceIdOutOfRange { device: dev.id, count });
        }
        if !(dev.flops_per_sec > 0.0) {
            issues.push(ClusterIssue::NonPositiveThroughput { device: dev.id });
        }
        if dev.mem_bytes == 0 {
            issues.push(ClusterIssue::NonPositiveMemory { device: dev.id });
        }
    }
    if !(cluster.link_latency_s >= 0.0) {
        issues.push(ClusterIssue::NegativeLatency);
    }
    if !(cluster.link_bandwidth_bps > 0.0) {
        issues.push(ClusterIssue::NonPositiveBandwidth);
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

impl ClusterSpec {
    /// `n` identical devices.
    pub fn uniform(n: usize, flops_per_sec: f64, mem_bytes: u64, latency_s: f64, bandwidth_bps: f64) -> Self {
        Self {
            devices: (1..=n)
                .map(|id| DeviceSpec {
                    id,
                    flops_per_sec,
                    mem_bytes,
                })
                .collect(),
            link_latency_s: latency_s,
            link_bandwidth_bps: bandwidth_bps,
        }
    }

    pub fn device(&self, id: usize) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.id == id)
    }

    /// An `n`-device cluster built by cycling through this cluster's devices.
    pub fn scaled_to(&self, n: usize) -> ClusterSpec {
        let devices = (1..=n)
            .map(|id| {
                let proto = &self.devices[(id - 1) % self.devices.len()];
                DeviceSpec { id, ..proto.clone() }
            })
            .collect();
        ClusterSpec {
            devices,
            ..self.clone()
        }
    }

    /// Time for one message of `bytes` on the link. Empty transfers are free.
    pub fn transfer_time(&self, bytes: f64) -> f64 {
        if bytes <= 0.0 {
            0.0
        } else {
            self.link_latency_s + bytes / self.link_bandwidth_bps
        }
    }

    /// Parses and validates a cluster document. Devices without an `id`
    /// are numbered by position.
    pub fn from_json(text: &str) -> Result<Self, ClusterError> {
        let doc: ClusterDoc = doc::from_json(text)?;
        let cluster = ClusterSpec {
            devices: doc
                .devices
                .into_iter()
                .enumerate()
                .map(|(idx, d)| DeviceSpec {
                    id: d.id.unwrap_or(idx + 1),
                    flops_per_sec: d.flops_per_sec,
                    mem_bytes: d.mem_bytes,
                })
                .collect(),
            link_latency_s: doc.link_latency_s,
            link_bandwidth_bps: doc.link_bandwidth_bps,
        };
        validate_cluster(&cluster).map_err(ClusterError::Invalid)?;
        Ok(cluster)
    }

    pub fn to_json(&self) -> String {
        let doc = ClusterDoc {
            devices: self
                .devices
                .iter()
                .map(|d| DeviceDoc {
                    id: Some(d.id),
                    flops_per_sec: d.flops_per_sec,
                    mem_bytes: d.mem_bytes,
                })
                .collect(),
            link_latency_s: self.link_latency_s,
            link_bandwidth_bps: self.link_bandwidth_bps,
        };
        serde_json::to_string_pretty(&doc).expect("cluster document serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterDoc {
    devices: Vec<DeviceDoc>,
    link_latency_s: f64,
    #[serde(rename = "link_bandwidth_Bps")]
    link_bandwidth_bps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    flops_per_sec: f64,
    mem_bytes: u64,
}
