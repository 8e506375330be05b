//! Static analysis: parameters, multiply-accumulate counts, fusion time and
//! theoretical receptive fields.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cednet_tensor::Conv2dParams;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ArchGraph, NodeId, Op};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Concrete output shape of a node for a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeShape {
    pub channels: usize,
    /// `None` after global pooling.
    pub spatial: Option<(usize, usize)>,
}

impl NodeShape {
    pub fn positions(&self) -> u64 {
        self.spatial.map_or(1, |(h, w)| (h * w) as u64)
    }

    pub fn elems(&self) -> u64 {
        self.channels as u64 * self.positions()
    }
}

/// Input sizes must be multiples of this (capped at 32).
pub fn required_divisor(g: &ArchGraph) -> usize {
    1 << g.max_level().min(5)
}

fn order(g: &ArchGraph) -> Result<Vec<NodeId>> {
    g.topo_order()
        .map_err(|id| Error::InvalidGraph(format!("cycle through node {} ({})", id, g.nodes[id].name)))
}

/// Per-node output shapes for an `h`×`w` image.
pub fn infer_shapes(g: &ArchGraph, (h, w): (usize, usize)) -> Result<Vec<NodeShape>> {
    let d = required_divisor(g);
    if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
        return Err(Error::Shape(format!("input {h}x{w} is not divisible by {d}")));
    }
    let mut shapes = vec![NodeShape { channels: 0, spatial: None }; g.nodes.len()];
    for id in order(g)? {
        let node = &g.nodes[id];
        let inp = node.inputs.first().map(|&i| shapes[i]);
        let spatial = match &node.op {
            Op::Input { level, .. } => Some((h >> level, w >> level)),
            &Op::Conv2d { kernel, stride, padding, dilation, groups, .. } => {
                let p = Conv2dParams { stride, padding, dilation, groups };
                let (ih, iw) = inp.and_then(|s| s.spatial).ok_or_else(|| Error::Shape(format!("{} has no spatial input", node.name)))?;
                match (p.out_len(ih, kernel), p.out_len(iw, kernel)) {
                    (Some(oh), Some(ow)) => Some((oh, ow)),
                    _ => return Err(Error::Shape(format!("{} produces an empty output from {ih}x{iw}", node.name))),
                }
            }
            Op::Upsample { scale } => inp.and_then(|s| s.spatial).map(|(a, b)| (a * scale, b * scale)),
            Op::GlobalAvgPool => None,
            Op::Add => {
                let first = inp.expect("add has inputs");
                if let Some(&bad) = node.inputs.iter().find(|&&i| shapes[i] != first) {
                    return Err(Error::Shape(format!(
                        "{} adds {:?} to {:?} from {}",
                        node.name, first, shapes[bad], g.nodes[bad].name
                    )));
                }
                first.spatial
            }
            _ => inp.and_then(|s| s.spatial),
        };
        shapes[id] = NodeShape { channels: node.channels, spatial };
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    /// Parameterised nodes only, keyed by node name.
    pub by_node: BTreeMap<String, u64>,
}

pub fn count_params(g: &ArchGraph) -> ParamCount {
    let by_node: BTreeMap<String, u64> = g
        .nodes
        .iter()
        .map(|n| (n.name.clone(), n.op.param_count()))
        .filter(|&(_, p)| p > 0)
        .collect();
    ParamCount { total: by_node.values().sum(), by_node }
}

/// Non-MAC work, in element operations, kept out of the headline figure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementwiseCosts {
    /// Four weighted taps per output element.
    pub upsample: u64,
    pub layer_norm: u64,
    pub gelu: u64,
    pub add: u64,
    pub pool: u64,
}

impl ElementwiseCosts {
    pub fn total(&self) -> u64 {
        self.upsample + self.layer_norm + self.gelu + self.add + self.pool
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopCount {
    /// Multiply-accumulates of convolutions and linear layers.
    pub macs: u64,
    pub by_node: BTreeMap<String, u64>,
    pub elementwise: ElementwiseCosts,
}

pub fn count_flops(g: &ArchGraph, input: (usize, usize)) -> Result<FlopCount> {
    if !input.0.is_multiple_of(32) || !input.1.is_multiple_of(32) {
        return Err(Error::Shape(format!("input {}x{} is not divisible by 32", input.0, input.1)));
    }
    let shapes = infer_shapes(g, input)?;
    let mut by_node = BTreeMap::new();
    let mut ew = ElementwiseCosts::default();
    for node in &g.nodes {
        let out = shapes[node.id];
        let macs = match node.op {
            Op::Conv2d { in_channels, kernel, groups, .. } => {
                out.elems() * (kernel * kernel * in_channels / groups) as u64
            }
            Op::Linear { in_features, out_features, .. } => out.positions() * (in_features * out_features) as u64,
            Op::Upsample { .. } => {
                ew.upsample += 4 * out.elems();
                0
            }
            Op::LayerNorm { .. } => {
                ew.layer_norm += out.elems();
                0
            }
            Op::Gelu => {
                ew.gelu += out.elems();
                0
            }
            Op::Add => {
                ew.add += (node.inputs.len() as u64 - 1) * out.elems();
                0
            }
            Op::GlobalAvgPool => {
                ew.pool += shapes[node.inputs[0]].elems();
                0
            }
            _ => 0,
        };
        if macs > 0 {
            by_node.insert(node.name.clone(), macs);
        }
    }
    Ok(FlopCount { macs: by_node.values().sum(), by_node, elementwise: ew })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTime {
    pub node: NodeId,
    /// Parameters upstream of the fusion node's inputs.
    pub pre_fusion_params: u64,
    pub total_params: u64,
    pub ratio: f64,
}

/// Share of parameters that must run before the first cross-scale merge.
pub fn fusion_time(g: &ArchGraph) -> Result<FusionTime> {
    let node = g.first_fusion.ok_or(Error::NoFusion)?;
    let upstream = g.ancestors(&g.nodes[node].inputs);
    let pre: u64 = g.nodes.iter().filter(|n| upstream[n.id]).map(|n| n.op.param_count()).sum();
    let total = count_params(g).total;
    let ratio = if total == 0 { 0.0 } else { pre as f64 / total as f64 };
    Ok(FusionTime { node, pre_fusion_params: pre, total_params: total, ratio })
}

pub fn fusion_time_ratio(g: &ArchGraph) -> Result<f64> {
    fusion_time(g).map(|f| f.ratio)
}

/// Theoretical receptive field in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceptiveField {
    Pixels { h: u64, w: u64 },
    /// Every input pixel contributes (after global pooling).
    Global,
}

impl ReceptiveField {
    pub fn size(&self) -> Option<u64> {
        match *self {
            ReceptiveField::Pixels { h, .. } => Some(h),
            ReceptiveField::Global => None,
        }
    }
}

/// Receptive field of every node, following the largest field at merges.
pub fn receptive_fields(g: &ArchGraph) -> Result<Vec<ReceptiveField>> {
    let mut rf: Vec<Option<u64>> = vec![None; g.nodes.len()];
    let jump = |id: NodeId| -> u64 { 1u64 << g.nodes[id].level.unwrap_or(0) };
    for id in order(g)? {
        let node = &g.nodes[id];
        let max_in = || -> Option<u64> {
            let mut best = Some(0);
            for &i in &node.inputs {
                best = match (best, rf[i]) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    _ => None,
                };
            }
            best
        };
        rf[id] = match node.op {
            Op::Input { level, .. } => Some(1u64 << level),
            Op::Conv2d { kernel, dilation, .. } => {
                let i = node.inputs[0];
                rf[i].map(|r| r + ((kernel - 1) * dilation) as u64 * jump(i))
            }
            Op::Upsample { .. } => {
                let i = node.inputs[0];
                rf[i].map(|r| r + jump(i))
            }
            Op::GlobalAvgPool => None,
            _ => max_in(),
        };
    }
    Ok(rf
        .into_iter()
        .map(|r| match r {
            Some(s) => ReceptiveField::Pixels { h: s, w: s },
            None => ReceptiveField::Global,
        })
        .collect())
}

pub fn receptive_field(g: &ArchGraph, node: NodeId) -> Result<ReceptiveField> {
    if node >= g.nodes.len() {
        return Err(Error::Invalid(format!("no node {node}")));
    }
    let reach = g.ancestors(&[node]);
    if !g.inputs.iter().any(|&i| reach[i]) {
        return Err(Error::Invalid(format!("node {} is not reachable from an input", g.nodes[node].name)));
    }
    Ok(receptive_fields(g)?[node])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSummary {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub input_size: (usize, usize),
    pub total_params: u64,
    pub params_by_node: BTreeMap<String, u64>,
    /// Multiply-accumulates at `input_size`.
    pub flops: u64,
    pub flops_by_node: BTreeMap<String, u64>,
    pub elementwise: ElementwiseCosts,
    pub first_fusion: Option<String>,
    pub pre_fusion_params: Option<u64>,
    pub fusion_time_ratio: Option<f64>,
    /// Keyed by output name.
    pub receptive_field: BTreeMap<String, ReceptiveField>,
    /// Top-level modules in graph order.
    pub modules: Vec<ModuleSummary>,
}

pub fn emit_report(g: &ArchGraph, input: (usize, usize)) -> Result<AnalysisReport> {
    let params = count_params(g);
    let flops = count_flops(g, input)?;
    let fusion = match fusion_time(g) {
        Ok(f) => Some(f),
        Err(Error::NoFusion) => None,
        Err(e) => return Err(e),
    };
    let rfs = receptive_fields(g)?;
    let receptive_field = g
        .outputs
        .iter()
        .filter_map(|&o| match &g.nodes[o].op {
            Op::Output { name } => Some((name.clone(), rfs[o])),
            _ => None,
        })
        .collect();

    let mut modules: Vec<ModuleSummary> = Vec::new();
    for node in &g.nodes {
        let m = node.module();
        if matches!(node.op, Op::Input { .. } | Op::Output { .. }) {
            continue;
        }
        if modules.last().is_none_or(|s| s.module != m) {
            if let Some(pos) = modules.iter().position(|s| s.module == m) {
                let s = modules.remove(pos);
                modules.push(s);
            } else {
                modules.push(ModuleSummary { module: m.to_string(), params: 0, flops: 0 });
            }
        }
        let s = modules.last_mut().expect("just pushed");
        s.params += params.by_node.get(&node.name).copied().unwrap_or(0);
        s.flops += flops.by_node.get(&node.name).copied().unwrap_or(0);
    }

    Ok(AnalysisReport {
        schema_version: REPORT_SCHEMA_VERSION,
        input_size: input,
        total_params: params.total,
        params_by_node: params.by_node,
        flops: flops.macs,
        flops_by_node: flops.by_node,
        elementwise: flops.elementwise,
        first_fusion: fusion.as_ref().map(|f| g.nodes[f.node].name.clone()),
        pre_fusion_params: fusion.as_ref().map(|f| f.pre_fusion_params),
        fusion_time_ratio: fusion.map(|f| f.ratio),
        receptive_field,
        modules,
    })
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("bad report: {e}")))
    }

    /// One row per top-level module.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,params,flops\n");
        for m in &self.modules {
            let _ = writeln!(s, "{},{},{}", m.module, m.params, m.flops);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input          {}x{}", self.input_size.0, self.input_size.1);
        let _ = writeln!(s, "params         {} ({:.2}M)", self.total_params, self.total_params as f64 / 1e6);
        let _ = writeln!(s, "flops (MACs)   {} ({:.2}G)", self.flops, self.flops as f64 / 1e9);
        match (self.fusion_time_ratio, &self.first_fusion) {
            (Some(r), Some(n)) => {
                let _ = writeln!(s, "fusion time    {:.4} (first fusion at {n})", r);
            }
            _ => {
                let _ = writeln!(s, "fusion time    n/a (no multi-scale fusion)");
            }
        }
        for (name, rf) in &self.receptive_field {
            let v = match rf {
                ReceptiveField::Pixels { h, w } => format!("{h}x{w}"),
                ReceptiveField::Global => "global".into(),
            };
            let _ = writeln!(s, "rf[{name}]{:width$}{v}", "", width = 11usize.saturating_sub(name.len()));
        }
        let _ = writeln!(s, "\n{:<14}{:>14}{:>18}", "module", "params", "flops");
        for m in &self.modules {
            let _ = writeln!(s, "{:<14}{:>14}{:>18}", m.module, m.params, m.flops);
        }
        s
    }
}
