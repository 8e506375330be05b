//! Typed layer DAGs. The same graph value drives static analysis and
//! execution.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    /// Graph input at stride `2^level` (0 for the image).
    Input { name: String, channels: usize, level: u8 },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    },
    LayerNorm { channels: usize, eps: f64 },
    Gelu,
    /// Per-position affine map over the channel axis.
    Linear { in_features: usize, out_features: usize, bias: bool },
    Add,
    Upsample { scale: usize },
    GlobalAvgPool,
    Output { name: String },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Linear { .. } => "linear",
            Op::Add => "add",
            Op::Upsample { .. } => "upsample",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Output { .. } => "output",
        }
    }

    /// Learnable tensors as (name, shape).
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Op::Conv2d { in_channels, out_channels, kernel, groups, bias, .. } => {
                let mut v = vec![("weight", vec![out_channels, in_channels / groups.max(1), kernel, kernel])];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            Op::LayerNorm { channels, .. } => vec![("weight", vec![channels]), ("bias", vec![channels])],
            Op::Linear { in_features, out_features, bias } => {
                let mut v = vec![("weight", vec![out_features, in_features])];
                if bias {
                    v.push(("bias", vec![out_features]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> u64 {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    /// Dotted path; the first component names the top-level module.
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Output channel count.
    pub channels: usize,
    /// Output stride exponent; `None` once spatial axes are pooled away.
    pub level: Option<u8>,
}

impl LayerNode {
    pub fn module(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Ced,
    LrCed,
}

/// A residual block as a span of nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub channels: usize,
    pub level: u8,
    pub input: NodeId,
    pub output: NodeId,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    pub nodes: Vec<LayerNode>,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
    /// First cross-scale add; see [`find_first_fusion`].
    pub first_fusion: Option<NodeId>,
    #[serde(default)]
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// (channels, level) of a node output.
pub type SymShape = (usize, Option<u8>);

fn log2_exact(v: usize) -> Option<u8> {
    (v.is_power_of_two()).then(|| v.trailing_zeros() as u8)
}

/// Output (channels, level) of `op` applied to inputs of the given shapes.
pub fn infer_symbolic(op: &Op, inputs: &[SymShape]) -> Result<SymShape, String> {
    let arity = |n: usize| -> Result<(), String> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(format!("{} expects {n} input(s), has {}", op.kind(), inputs.len()))
        }
    };
    match op {
        Op::Input { channels, level, .. } => {
            arity(0)?;
            Ok((*channels, Some(*level)))
        }
        &Op::Conv2d { in_channels, out_channels, kernel, stride, padding, dilation, groups, .. } => {
            arity(1)?;
            let (c, level) = inputs[0];
            let level = level.ok_or("conv2d on a pooled tensor")?;
            if c != in_channels {
                return Err(format!("conv2d expects {in_channels} input channels, got {c}"));
            }
            if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                return Err(format!("groups {groups} must divide {in_channels} and {out_channels}"));
            }
            if kernel == 0 || dilation == 0 {
                return Err("kernel and dilation must be >= 1".into());
            }
            let shift = log2_exact(stride).ok_or_else(|| format!("stride {stride} is not a power of two"))?;
            // Output must be exactly input / stride for inputs divisible by stride.
            let reach = dilation * (kernel - 1);
            if 2 * padding > reach || 2 * padding + stride < reach + 1 {
                return Err(format!(
                    "kernel {kernel}, dilation {dilation}, padding {padding} does not map H to H/{stride}"
                ));
            }
            Ok((out_channels, Some(level + shift)))
        }
        &Op::LayerNorm { channels, eps } => {
            arity(1)?;
            if inputs[0].0 != channels {
                return Err(format!("layer_norm over {channels} channels, input has {}", inputs[0].0));
            }
            if eps.is_nan() || eps <= 0.0 {
                return Err("layer_norm eps must be > 0".into());
            }
            Ok(inputs[0])
        }
        Op::Gelu => {
            arity(1)?;
            Ok(inputs[0])
        }
        &Op::Linear { in_features, out_features, .. } => {
            arity(1)?;
            if inputs[0].0 != in_features {
                return Err(format!("linear expects {in_features} features, input has {}", inputs[0].0));
            }
            Ok((out_features, inputs[0].1))
        }
        Op::Add => {
            if inputs.len() < 2 {
                return Err("add needs at least two inputs".into());
            }
            if inputs.iter().any(|s| *s != inputs[0]) {
                return Err(format!("add inputs disagree: {inputs:?}"));
            }
            Ok(inputs[0])
        }
        &Op::Upsample { scale } => {
            arity(1)?;
            let shift = log2_exact(scale).filter(|&s| s >= 1).ok_or_else(|| format!("bad upsample scale {scale}"))?;
            let level = inputs[0].1.ok_or("upsample on a pooled tensor")?;
            if level < shift {
                return Err(format!("upsample x{scale} from stride 2^{level} goes above input resolution"));
            }
            Ok((inputs[0].0, Some(level - shift)))
        }
        Op::GlobalAvgPool => {
            arity(1)?;
            inputs[0].1.ok_or("global_avg_pool on a pooled tensor")?;
            Ok((inputs[0].0, None))
        }
        Op::Output { .. } => {
            arity(1)?;
            Ok(inputs[0])
        }
    }
}

impl ArchGraph {
    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Output node carrying the given output name.
    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .copied()
            .find(|&id| matches!(&self.nodes[id].op, Op::Output { name: n } if n == name))
    }

    pub fn output_names(&self) -> Vec<String> {
        self.outputs
            .iter()
            .filter_map(|&id| match &self.nodes[id].op {
                Op::Output { name } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn input_names(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter_map(|&id| match &self.nodes[id].op {
                Op::Input { name, .. } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    /// Largest stride exponent among feature-bearing nodes.
    pub fn max_level(&self) -> u8 {
        self.nodes.iter().filter_map(|n| n.level).max().unwrap_or(0)
    }

    /// Stable topological order: among ready nodes the smallest id goes
    /// first. Fails with the id of a node on a cycle.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, NodeId> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers = vec![Vec::new(); n];
        for node in &self.nodes {
            for &i in &node.inputs {
                if i < n {
                    indegree[node.id] += 1;
                    consumers[i].push(node.id);
                }
            }
        }
        let mut ready: BinaryHeap<Reverse<NodeId>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &c in &consumers[id] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() == n {
            return Ok(order);
        }
        // Walk backwards through unresolved inputs until a node repeats.
        let mut cur = (0..n).find(|&i| indegree[i] > 0).expect("unfinished node");
        let mut seen = vec![false; n];
        while !seen[cur] {
            seen[cur] = true;
            cur = self.nodes[cur]
                .inputs
                .iter()
                .copied()
                .find(|&i| i < n && indegree[i] > 0)
                .expect("blocked node has a blocked input");
        }
        Err(cur)
    }

    /// Ids of `roots` and everything upstream of them.
    pub fn ancestors(&self, roots: &[NodeId]) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(id) = stack.pop() {
            if !std::mem::replace(&mut mark[id], true) {
                stack.extend(&self.nodes[id].inputs);
            }
        }
        mark
    }

    /// Structural checks; never panics on a corrupted graph.
    pub fn validate(&self) -> Vec<Diagnostic> {
        validate_graph(self)
    }
}

/// Scale provenance of every node in `order`. A strided conv starts a new
/// provenance at its output level; an add over inputs of different
/// provenance is a cross-scale fusion and starts one at its own level.
fn provenance(g: &ArchGraph, order: &[NodeId]) -> (Vec<Option<u8>>, Vec<NodeId>) {
    let mut prov: Vec<Option<u8>> = vec![None; g.nodes.len()];
    let mut fusions = Vec::new();
    for &id in order {
        let node = &g.nodes[id];
        let first = node.inputs.first().and_then(|&i| prov[i]);
        prov[id] = match &node.op {
            Op::Input { level, .. } => Some(*level),
            Op::Conv2d { stride, .. } if *stride > 1 => node.level,
            Op::Add => {
                if node.inputs.iter().all(|&i| prov[i] == first) {
                    first
                } else {
                    fusions.push(id);
                    node.level
                }
            }
            _ => first,
        };
    }
    (prov, fusions)
}

/// Every cross-scale add in stable topological order.
pub fn fusion_nodes(g: &ArchGraph) -> Vec<NodeId> {
    match g.topo_order() {
        Ok(order) => provenance(g, &order).1,
        Err(_) => Vec::new(),
    }
}

/// First add whose inputs carry features that originate at different scale
/// levels.
pub fn find_first_fusion(g: &ArchGraph) -> Option<NodeId> {
    fusion_nodes(g).first().copied()
}

fn diag(node: Option<NodeId>, message: String) -> Diagnostic {
    Diagnostic { node, message }
}

pub fn validate_graph(g: &ArchGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let n = g.nodes.len();

    let mut names = BTreeMap::new();
    for (idx, node) in g.nodes.iter().enumerate() {
        if node.id != idx {
            out.push(diag(Some(idx), format!("node at index {idx} has id {}", node.id)));
        }
        if let Some(prev) = names.insert(node.name.as_str(), idx) {
            out.push(diag(Some(idx), format!("duplicate name {} (also node {prev})", node.name)));
        }
        for &i in &node.inputs {
            if i >= n {
                out.push(diag(Some(idx), format!("node {} references missing node {i}", node.name)));
            }
        }
    }
    if !out.is_empty() {
        return out;
    }
    let mut push = |node: Option<NodeId>, message: String| out.push(Diagnostic { node, message });

    let order = match g.topo_order() {
        Ok(o) => o,
        Err(id) => {
            push(Some(id), format!("cycle through node {} ({})", id, g.nodes[id].name));
            return out;
        }
    };

    for &id in &order {
        let node = &g.nodes[id];
        let ins: Vec<SymShape> = node.inputs.iter().map(|&i| (g.nodes[i].channels, g.nodes[i].level)).collect();
        match infer_symbolic(&node.op, &ins) {
            Ok(shape) if shape != (node.channels, node.level) => push(
                Some(id),
                format!("node {} records {:?} but its op yields {:?}", node.name, (node.channels, node.level), shape),
            ),
            Ok(_) => {}
            Err(e) => push(Some(id), format!("node {}: {e}", node.name)),
        }
    }

    for &i in &g.inputs {
        if !matches!(g.nodes.get(i).map(|n| &n.op), Some(Op::Input { .. })) {
            push(Some(i), format!("declared input {i} is not an input node"));
        }
    }
    for node in &g.nodes {
        if matches!(node.op, Op::Input { .. }) && !g.inputs.contains(&node.id) {
            push(Some(node.id), format!("input node {} is not declared", node.name));
        }
    }
    if g.outputs.is_empty() {
        push(None, "graph has no outputs".into());
    }
    for &o in &g.outputs {
        match g.nodes.get(o) {
            Some(node) if matches!(node.op, Op::Output { .. }) => {
                let anc = g.ancestors(&[o]);
                if !g.inputs.iter().any(|&i| anc[i]) {
                    push(Some(o), format!("output {} is unreachable from any input", node.name));
                }
            }
            _ => push(Some(o), format!("declared output {o} is not an output node")),
        }
    }

    let recomputed = provenance(g, &order).1.first().copied();
    if recomputed != g.first_fusion {
        push(
            g.first_fusion,
            format!("first-fusion annotation {:?} disagrees with topology ({recomputed:?})", g.first_fusion),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: NodeId, op: Op, inputs: Vec<NodeId>, channels: usize, level: Option<u8>) -> LayerNode {
        LayerNode { id, name: format!("m.n{id}"), op, inputs, channels, level }
    }

    fn two_level() -> ArchGraph {
        let nodes = vec![
            node(0, Op::Input { name: "x".into(), channels: 2, level: 3 }, vec![], 2, Some(3)),
            node(
                1,
                Op::Conv2d { in_channels: 2, out_channels: 2, kernel: 2, stride: 2, padding: 0, dilation: 1, groups: 1, bias: true },
                vec![0],
                2,
                Some(4),
            ),
            node(2, Op::Upsample { scale: 2 }, vec![1], 2, Some(3)),
            node(3, Op::Add, vec![0, 2], 2, Some(3)),
            node(4, Op::Output { name: "y".into() }, vec![3], 2, Some(3)),
        ];
        ArchGraph { nodes, inputs: vec![0], outputs: vec![4], first_fusion: Some(3), blocks: vec![] }
    }

    #[test]
    fn valid_graph_has_no_diagnostics() {
        let g = two_level();
        assert_eq!(validate_graph(&g), vec![]);
        assert_eq!(find_first_fusion(&g), Some(3));
    }

    #[test]
    fn cycle_is_reported() {
        let mut g = two_level();
        g.nodes[1].inputs = vec![3];
        let d = validate_graph(&g);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.starts_with("cycle through node "), "{}", d[0]);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut g = two_level();
        g.nodes[2].op = Op::Upsample { scale: 4 };
        let d = validate_graph(&g);
        assert!(!d.is_empty());
        let mut g = two_level();
        g.first_fusion = None;
        assert_eq!(validate_graph(&g).len(), 1);
    }

    #[test]
    fn same_scale_add_is_not_a_fusion() {
        let mut g = two_level();
        g.nodes[3].inputs = vec![0, 0];
        g.first_fusion = None;
        assert_eq!(find_first_fusion(&g), None);
        assert_eq!(validate_graph(&g), vec![]);
    }

    #[test]
    fn conv_padding_rule() {
        let conv = |k, s, p, d| Op::Conv2d { in_channels: 1, out_channels: 1, kernel: k, stride: s, padding: p, dilation: d, groups: 1, bias: false };
        assert!(infer_symbolic(&conv(7, 1, 3, 1), &[(1, Some(3))]).is_ok());
        assert!(infer_symbolic(&conv(7, 1, 9, 3), &[(1, Some(3))]).is_ok());
        assert_eq!(infer_symbolic(&conv(3, 2, 1, 1), &[(1, Some(0))]).unwrap(), (1, Some(1)));
        assert_eq!(infer_symbolic(&conv(4, 4, 0, 1), &[(1, Some(0))]).unwrap(), (1, Some(2)));
        assert!(infer_symbolic(&conv(7, 1, 2, 1), &[(1, Some(3))]).is_err());
        assert!(infer_symbolic(&conv(3, 3, 1, 1), &[(1, Some(3))]).is_err());
    }
}
