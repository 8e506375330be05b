//! Graph builders for CEDNet, the ConvNeXt baseline and the toy
//! segmentation head.

use std::collections::BTreeMap;

use crate::config::{ArchConfig, ConvNextConfig, Mode, ModelSpec, Style};
use crate::error::{Error, Result};
use crate::graph::{find_first_fusion, infer_symbolic, validate_graph, ArchGraph, Block, BlockKind, LayerNode, NodeId, Op};

/// LayerNorm epsilon used throughout.
pub const LN_EPS: f64 = 1e-6;

/// Incremental graph construction. Every node is shape-checked as it is
/// added, so a bad merge fails at the node that introduces it.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    blocks: Vec<Block>,
    mlp_ratio: usize,
}

/// Encoder maps and, when a decoder was built, merged maps of one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageTaps {
    pub e8: NodeId,
    pub e16: NodeId,
    pub e32: NodeId,
    pub decoded: Option<[NodeId; 3]>,
}

impl GraphBuilder {
    pub fn new(mlp_ratio: usize) -> Self {
        Self { nodes: Vec::new(), inputs: Vec::new(), outputs: Vec::new(), blocks: Vec::new(), mlp_ratio }
    }

    /// Starts from an existing graph without its output nodes. Returns the
    /// builder and, per former output name, the node that fed it.
    pub fn from_graph(g: &ArchGraph, mlp_ratio: usize) -> (Self, BTreeMap<String, NodeId>) {
        let mut b = Self::new(mlp_ratio);
        let mut remap = vec![usize::MAX; g.nodes.len()];
        let mut taps = BTreeMap::new();
        for node in &g.nodes {
            if let Op::Output { name } = &node.op {
                taps.insert(name.clone(), remap[node.inputs[0]]);
                continue;
            }
            let id = b.nodes.len();
            remap[node.id] = id;
            b.nodes.push(LayerNode {
                id,
                inputs: node.inputs.iter().map(|&i| remap[i]).collect(),
                ..node.clone()
            });
        }
        b.inputs = g.inputs.iter().map(|&i| remap[i]).collect();
        b.blocks = g
            .blocks
            .iter()
            .map(|blk| Block {
                input: remap[blk.input],
                output: remap[blk.output],
                nodes: blk.nodes.iter().map(|&i| remap[i]).collect(),
                ..blk.clone()
            })
            .collect();
        (b, taps)
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let shapes: Vec<_> = inputs.iter().map(|&i| (self.nodes[i].channels, self.nodes[i].level)).collect();
        let (channels, level) = infer_symbolic(&op, &shapes).map_err(|msg| Error::Build { node: name.clone(), msg })?;
        let id = self.nodes.len();
        self.nodes.push(LayerNode { id, name, op, inputs, channels, level });
        Ok(id)
    }

    pub fn input(&mut self, name: &str, channels: usize, level: u8) -> Result<NodeId> {
        let id = self.push(format!("input.{name}"), Op::Input { name: name.into(), channels, level }, vec![])?;
        self.inputs.push(id);
        Ok(id)
    }

    pub fn output(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let id = self.push(format!("output.{name}"), Op::Output { name: name.into() }, vec![x])?;
        self.outputs.push(id);
        Ok(id)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let in_channels = self.channels(x);
        let op = Op::Conv2d { in_channels, out_channels, kernel, stride, padding, dilation, groups, bias: true };
        self.push(name.into(), op, vec![x])
    }

    pub fn conv1x1(&mut self, name: &str, x: NodeId, out_channels: usize) -> Result<NodeId> {
        self.conv(name, x, out_channels, 1, 1, 0, 1, 1)
    }

    /// k×k stride-k patch conv.
    pub fn patchify(&mut self, name: &str, x: NodeId, out_channels: usize, k: usize) -> Result<NodeId> {
        self.conv(name, x, out_channels, k, k, 0, 1, 1)
    }

    pub fn layer_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let channels = self.channels(x);
        self.push(name.into(), Op::LayerNorm { channels, eps: LN_EPS }, vec![x])
    }

    pub fn gelu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.into(), Op::Gelu, vec![x])
    }

    pub fn linear(&mut self, name: &str, x: NodeId, out_features: usize) -> Result<NodeId> {
        let in_features = self.channels(x);
        self.push(name.into(), Op::Linear { in_features, out_features, bias: true }, vec![x])
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(name.into(), Op::Add, vec![a, b])
    }

    pub fn upsample(&mut self, name: &str, x: NodeId, scale: usize) -> Result<NodeId> {
        self.push(name.into(), Op::Upsample { scale }, vec![x])
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.into(), Op::GlobalAvgPool, vec![x])
    }

    fn record_block(&mut self, name: &str, kind: BlockKind, input: NodeId, output: NodeId, first: NodeId) {
        let node = &self.nodes[input];
        self.blocks.push(Block {
            name: name.into(),
            kind,
            channels: node.channels,
            level: node.level.unwrap_or(0),
            input,
            output,
            nodes: (first..self.nodes.len()).collect(),
        });
    }

    /// Residual token-mixer and MLP body shared by both block kinds.
    fn ced_body(&mut self, p: &str, x: NodeId) -> Result<NodeId> {
        let c = self.channels(x);
        let h = self.conv(&format!("{p}.dw"), x, c, 7, 1, 3, 1, c)?;
        let h = self.layer_norm(&format!("{p}.norm"), h)?;
        let h = self.linear(&format!("{p}.fc1"), h, self.mlp_ratio * c)?;
        let h = self.gelu(&format!("{p}.act"), h)?;
        let h = self.linear(&format!("{p}.fc2"), h, c)?;
        self.add(&format!("{p}.add"), x, h)
    }

    /// dw7×7 → LN → linear(c→ratio·c) → GELU → linear(ratio·c→c), plus the
    /// block residual.
    pub fn ced_block(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let first = self.nodes.len();
        let out = self.ced_body(name, x)?;
        self.record_block(name, BlockKind::Ced, x, out, first);
        Ok(out)
    }

    /// A dilated dw7×7 with its own residual, followed by a CED block.
    pub fn lr_ced_block(&mut self, name: &str, x: NodeId, r: usize) -> Result<NodeId> {
        let first = self.nodes.len();
        let c = self.channels(x);
        let d = self.conv(&format!("{name}.dilated"), x, c, 7, 1, 3 * r, r, c)?;
        let y = self.add(&format!("{name}.dilated_add"), x, d)?;
        let out = self.ced_body(name, y)?;
        self.record_block(name, BlockKind::LrCed, x, out, first);
        Ok(out)
    }

    /// Two 3×3 stride-2 convs with LN and GELU, `n0` blocks at stride 4 and
    /// a 2×2 stride-2 conv to `c1`.
    pub fn stem(&mut self, x: NodeId, c0: usize, c1: usize, n0: usize) -> Result<NodeId> {
        let h = self.conv("stem.conv1", x, c0, 3, 2, 1, 1, 1)?;
        let h = self.layer_norm("stem.norm1", h)?;
        let h = self.gelu("stem.act1", h)?;
        let h = self.conv("stem.conv2", h, c0, 3, 2, 1, 1, 1)?;
        let h = self.layer_norm("stem.norm2", h)?;
        let mut h = self.gelu("stem.act2", h)?;
        for j in 0..n0 {
            h = self.ced_block(&format!("stem.block{j}"), h)?;
        }
        self.patchify("stem.down", h, c1, 2)
    }

    /// LN followed by a 2×2 stride-2 conv.
    fn downsample(&mut self, p: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let h = self.layer_norm(&format!("{p}.norm"), x)?;
        self.patchify(&format!("{p}.conv"), h, out, 2)
    }

    /// One encoder-decoder stage on a stride-8 map. Without a decoder only
    /// the encoder taps are produced.
    #[allow(clippy::too_many_arguments)]
    pub fn stage(
        &mut self,
        p: &str,
        x: NodeId,
        style: Style,
        [_, c2, c3]: [usize; 3],
        [n1, n2, n3]: [usize; 3],
        r: usize,
        lr_blocks: bool,
        decoder: bool,
    ) -> Result<StageTaps> {
        let mut h = x;
        for j in 0..n1 {
            h = self.ced_block(&format!("{p}.enc8.block{j}"), h)?;
        }
        let e8 = h;
        h = self.downsample(&format!("{p}.down16"), h, c2)?;
        for j in 0..n2 {
            h = self.ced_block(&format!("{p}.enc16.block{j}"), h)?;
        }
        let e16 = h;
        h = self.downsample(&format!("{p}.down32"), h, c3)?;
        for j in 0..n3 {
            let name = format!("{p}.enc32.block{j}");
            h = if lr_blocks { self.lr_ced_block(&name, h, r)? } else { self.ced_block(&name, h)? };
        }
        let e32 = h;
        if !decoder {
            return Ok(StageTaps { e8, e16, e32, decoded: None });
        }

        let c1 = self.channels(x);
        let (l16, l8) = match style {
            Style::Hourglass => {
                (self.ced_block(&format!("{p}.dec.lateral16"), e16)?, self.ced_block(&format!("{p}.dec.lateral8"), e8)?)
            }
            _ => (e16, e8),
        };
        let p32 = e32;
        let t = self.conv1x1(&format!("{p}.dec.reduce32"), p32, c2)?;
        let t = self.upsample(&format!("{p}.dec.up32"), t, 2)?;
        let mut p16 = self.add(&format!("{p}.dec.merge16"), l16, t)?;
        if style == Style::Unet {
            p16 = self.ced_block(&format!("{p}.dec.block16"), p16)?;
        }
        let t = self.conv1x1(&format!("{p}.dec.reduce16"), p16, c1)?;
        let t = self.upsample(&format!("{p}.dec.up16"), t, 2)?;
        let mut p8 = self.add(&format!("{p}.dec.merge8"), l8, t)?;
        if style == Style::Unet {
            p8 = self.ced_block(&format!("{p}.dec.block8"), p8)?;
        }
        Ok(StageTaps { e8, e16, e32, decoded: Some([p8, p16, p32]) })
    }

    /// GAP → LN → linear.
    pub fn classifier(&mut self, x: NodeId, num_classes: usize) -> Result<NodeId> {
        let h = self.global_avg_pool("head.pool", x)?;
        let h = self.layer_norm("head.norm", h)?;
        self.linear("head.fc", h, num_classes)
    }

    /// Annotates the first fusion and checks the whole graph.
    pub fn finish(self) -> Result<ArchGraph> {
        let mut g = ArchGraph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
            first_fusion: None,
            blocks: self.blocks,
        };
        g.first_fusion = find_first_fusion(&g);
        let diags = validate_graph(&g);
        if !diags.is_empty() {
            let msgs: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            return Err(Error::InvalidGraph(msgs.join("; ")));
        }
        Ok(g)
    }
}

/// A single CED block on a stride-8 input.
pub fn build_ced_block(channels: usize, mlp_ratio: usize) -> Result<ArchGraph> {
    let mut b = GraphBuilder::new(mlp_ratio);
    let x = b.input("x", channels, 3)?;
    let y = b.ced_block("block", x)?;
    b.output("y", y)?;
    b.finish()
}

pub fn build_lr_ced_block(channels: usize, mlp_ratio: usize, r: usize) -> Result<ArchGraph> {
    let mut b = GraphBuilder::new(mlp_ratio);
    let x = b.input("x", channels, 5)?;
    let y = b.lr_ced_block("block", x, r)?;
    b.output("y", y)?;
    b.finish()
}

pub fn build_stem(c0: usize, c1: usize, n0: usize, mlp_ratio: usize) -> Result<ArchGraph> {
    let mut b = GraphBuilder::new(mlp_ratio);
    let x = b.input("image", 3, 0)?;
    let y = b.stem(x, c0, c1, n0)?;
    b.output("x8", y)?;
    b.finish()
}

/// One stage as a standalone graph from a stride-8 input `x` to outputs
/// `p8`, `p16`, `p32`.
pub fn build_stage(
    style: Style,
    channels: [usize; 3],
    blocks: [usize; 3],
    r: usize,
    mlp_ratio: usize,
    lr_blocks: bool,
) -> Result<ArchGraph> {
    let mut b = GraphBuilder::new(mlp_ratio);
    let x = b.input("x", channels[0], 3)?;
    let taps = b.stage("stage1", x, style, channels, blocks, r, lr_blocks, true)?;
    let [p8, p16, p32] = taps.decoded.expect("decoder requested");
    b.output("p8", p8)?;
    b.output("p16", p16)?;
    b.output("p32", p32)?;
    b.finish()
}

/// Stem followed by `m` cascaded stages; only each stage's stride-8 output
/// feeds the next.
pub fn build_cednet(cfg: &ArchConfig) -> Result<ArchGraph> {
    cfg.validate()?;
    let [c0, c1, c2, c3] = cfg.channels;
    let mut b = GraphBuilder::new(cfg.mlp_ratio);
    let image = b.input("image", 3, 0)?;
    let mut x = b.stem(image, c0, c1, cfg.blocks[0])?;
    let mut last = None;
    for i in 0..cfg.stages {
        let decoder = !(i + 1 == cfg.stages && cfg.mode == Mode::Classification);
        let taps = b.stage(
            &format!("stage{}", i + 1),
            x,
            cfg.style,
            [c1, c2, c3],
            cfg.stage_blocks(i),
            cfg.dilation,
            cfg.lr_blocks,
            decoder,
        )?;
        if let Some([p8, ..]) = taps.decoded {
            x = p8;
        }
        last = Some(taps);
    }
    let taps = last.expect("at least one stage");
    match taps.decoded {
        Some([p8, p16, p32]) => {
            b.output("p8", p8)?;
            b.output("p16", p16)?;
            b.output("p32", p32)?;
        }
        None => {
            let logits = b.classifier(taps.e32, cfg.num_classes)?;
            b.output("logits", logits)?;
        }
    }
    b.finish()
}

/// ConvNeXt: 4×4 patchify stem with LN, four stages of CED-style blocks with
/// LN + 2×2 downsampling between them, and either a classifier or an FPN
/// neck on the stride 8/16/32 maps.
pub fn build_convnext(cfg: &ConvNextConfig) -> Result<ArchGraph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new(cfg.mlp_ratio);
    let image = b.input("image", 3, 0)?;
    let h = b.patchify("stem.conv", image, cfg.dims[0], 4)?;
    let mut h = b.layer_norm("stem.norm", h)?;
    let mut taps = Vec::with_capacity(4);
    for (i, (&depth, &dim)) in cfg.depths.iter().zip(&cfg.dims).enumerate() {
        if i > 0 {
            h = b.downsample(&format!("stage{}.down", i + 1), h, dim)?;
        }
        for j in 0..depth {
            h = b.ced_block(&format!("stage{}.block{j}", i + 1), h)?;
        }
        taps.push(h);
    }

    match (&cfg.fpn, cfg.mode) {
        (_, Mode::Classification) => {
            let logits = b.classifier(h, cfg.num_classes)?;
            b.output("logits", logits)?;
        }
        (None, Mode::Dense) => {
            for (i, &t) in taps.iter().enumerate() {
                b.output(&format!("c{}", i + 2), t)?;
            }
        }
        (Some(fpn), Mode::Dense) => {
            let f = fpn.channels;
            let lat3 = b.conv1x1("fpn.lateral3", taps[1], f)?;
            let lat4 = b.conv1x1("fpn.lateral4", taps[2], f)?;
            let lat5 = b.conv1x1("fpn.lateral5", taps[3], f)?;
            let up = b.upsample("fpn.up5", lat5, 2)?;
            let m4 = b.add("fpn.merge4", lat4, up)?;
            let up = b.upsample("fpn.up4", m4, 2)?;
            let m3 = b.add("fpn.merge3", lat3, up)?;
            for (lvl, m) in [(3, m3), (4, m4), (5, lat5)] {
                let out = if fpn.output_convs { b.conv(&format!("fpn.out{lvl}"), m, f, 3, 1, 1, 1, 1)? } else { m };
                b.output(&format!("p{lvl}"), out)?;
            }
            let mut top = taps[3];
            for k in 0..fpn.extra_levels {
                top = b.conv(&format!("fpn.p{}", 6 + k), top, f, 3, 2, 1, 1, 1)?;
                b.output(&format!("p{}", 6 + k), top)?;
            }
        }
    }
    b.finish()
}

pub fn build_model(spec: &ModelSpec) -> Result<ArchGraph> {
    match spec {
        ModelSpec::CedNet(c) => build_cednet(c),
        ModelSpec::ConvNext(c) => build_convnext(c),
    }
}

/// Replaces the `p8`/`p16`/`p32` outputs of a dense graph with a minimal
/// segmentation head: per-level 1×1 conv to `width`, upsample to stride 8,
/// sum, 1×1 conv to classes, upsample ×8. The single output is `logits`.
pub fn attach_seg_head(g: &ArchGraph, num_classes: usize, width: usize) -> Result<ArchGraph> {
    let (mut b, taps) = GraphBuilder::from_graph(g, 4);
    let tap = |name: &str| {
        taps.get(name).copied().ok_or_else(|| Error::Invalid(format!("segmentation head needs a dense graph with output {name}")))
    };
    let (f8, f16, f32) = (tap("p8")?, tap("p16")?, tap("p32")?);
    let l8 = b.conv1x1("seg_head.lateral8", f8, width)?;
    let l16 = b.conv1x1("seg_head.lateral16", f16, width)?;
    let l32 = b.conv1x1("seg_head.lateral32", f32, width)?;
    let u16 = b.upsample("seg_head.up16", l16, 2)?;
    let u32 = b.upsample("seg_head.up32", l32, 4)?;
    let s = b.add("seg_head.sum16", l8, u16)?;
    let s = b.add("seg_head.sum32", s, u32)?;
    let logits = b.conv1x1("seg_head.classifier", s, num_classes)?;
    let logits = b.upsample("seg_head.up", logits, 8)?;
    b.output("logits", logits)?;
    b.finish()
}
