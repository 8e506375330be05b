//! Parameter storage, initialisation and graph evaluation on a [`Tape`].

use std::collections::BTreeMap;

use cednet_tensor::{Conv2dParams, Element, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analyzer::required_divisor;
use crate::error::{Error, Result};
use crate::graph::{ArchGraph, LayerNode, NodeId, Op};

/// Standard deviation of the truncated normal used for conv and linear
/// weights.
pub const INIT_STD: f64 = 0.02;
/// Absolute truncation bounds of the weight distribution.
pub const INIT_BOUND: f64 = 2.0;

/// Learnable tensors keyed by `"{node name}.{weight|bias}"`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub seed: u64,
    params: BTreeMap<String, Tensor<T>>,
}

pub fn param_key(node: &str, param: &str) -> String {
    format!("{node}.{param}")
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { seed, params: BTreeMap::new() }
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.params.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(key)
    }

    pub fn insert(&mut self, key: String, t: Tensor<T>) -> Option<Tensor<T>> {
        self.params.insert(key, t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Every parameterised node has exactly its tensors, with matching shapes.
    pub fn check(&self, g: &ArchGraph) -> Result<()> {
        let mut expected = 0;
        for node in &g.nodes {
            for (pname, shape) in node.op.param_shapes() {
                expected += 1;
                let key = param_key(&node.name, pname);
                match self.params.get(&key) {
                    None => return Err(Error::Invalid(format!("missing parameter {key}"))),
                    Some(t) if t.shape() != shape.as_slice() => {
                        return Err(Error::Shape(format!("parameter {key} has shape {:?}, node needs {shape:?}", t.shape())))
                    }
                    Some(_) => {}
                }
            }
        }
        if expected != self.params.len() {
            return Err(Error::Invalid(format!(
                "store holds {} tensors, graph needs {expected}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { seed: self.seed, params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Weights drawn from N(0, std²) truncated to ±[`INIT_BOUND`], zero biases,
/// LayerNorm scale one and shift zero. Nodes are visited in id order from a
/// single seeded stream.
pub fn init_params_with_std<T: Element>(g: &ArchGraph, seed: u64, std: f64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut store = ParamStore::new(seed);
    for node in &g.nodes {
        for (pname, shape) in node.op.param_shapes() {
            let t = match (&node.op, pname) {
                (Op::LayerNorm { .. }, "weight") => Tensor::ones(shape),
                (_, "bias") => Tensor::zeros(shape),
                _ => Tensor::from_fn(shape, |_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= INIT_BOUND {
                        break T::from_f64(v);
                    }
                }),
            };
            store.insert(param_key(&node.name, pname), t);
        }
    }
    store
}

pub fn init_params<T: Element>(g: &ArchGraph, seed: u64) -> ParamStore<T> {
    init_params_with_std(g, seed, INIT_STD)
}

/// Random input in [0, 1) for smoke runs.
pub fn random_image<T: Element>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.gen::<f64>()))
}

/// Puts every stored tensor on the tape.
pub fn bind_params<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, requires_grad: bool) -> BTreeMap<String, Var> {
    store
        .iter()
        .map(|(k, t)| {
            let mut t = t.detached();
            t.requires_grad = requires_grad;
            (k.clone(), tape.leaf(t))
        })
        .collect()
}

/// Evaluates every node on the tape. Returns one var per node id.
pub fn run_graph<T: Element>(
    tape: &mut Tape<T>,
    g: &ArchGraph,
    params: &BTreeMap<String, Var>,
    inputs: &BTreeMap<String, Var>,
) -> Result<Vec<Var>> {
    let order = g.topo_order().map_err(|id| Error::InvalidGraph(format!("cycle through node {id}")))?;
    let mut vars: Vec<Option<Var>> = vec![None; g.nodes.len()];
    for id in order {
        let args: Vec<Var> = g.nodes[id].inputs.iter().map(|&i| vars[i].expect("inputs evaluated first")).collect();
        vars[id] = Some(apply_node(tape, &g.nodes[id], &args, params, inputs)?);
    }
    Ok(vars.into_iter().map(|v| v.expect("all nodes evaluated")).collect())
}

/// Records one node on the tape given its evaluated inputs.
pub fn apply_node<T: Element>(
    tape: &mut Tape<T>,
    node: &LayerNode,
    args: &[Var],
    params: &BTreeMap<String, Var>,
    inputs: &BTreeMap<String, Var>,
) -> Result<Var> {
    let param = |p: &str| -> Result<Var> {
        let key = param_key(&node.name, p);
        params.get(&key).copied().ok_or_else(|| Error::Invalid(format!("missing parameter {key}")))
    };
    Ok(match &node.op {
        Op::Input { name, .. } => *inputs.get(name).ok_or_else(|| Error::Invalid(format!("missing graph input {name}")))?,
        &Op::Conv2d { stride, padding, dilation, groups, bias, .. } => {
            let b = if bias { Some(param("bias")?) } else { None };
            let p = Conv2dParams { stride, padding, dilation, groups };
            tape.conv2d(args[0], param("weight")?, b, p)?
        }
        &Op::LayerNorm { eps, .. } => tape.layer_norm(args[0], param("weight")?, param("bias")?, eps)?,
        Op::Gelu => tape.gelu(args[0])?,
        &Op::Linear { bias, .. } => {
            let b = if bias { Some(param("bias")?) } else { None };
            tape.linear(args[0], param("weight")?, b)?
        }
        Op::Add => {
            let mut acc = args[0];
            for &a in &args[1..] {
                acc = tape.add(acc, a)?;
            }
            acc
        }
        &Op::Upsample { scale } => tape.upsample(args[0], scale)?,
        Op::GlobalAvgPool => tape.global_avg_pool(args[0])?,
        Op::Output { .. } => args[0],
    })
}

/// Checks an image batch against the graph's single input node.
pub fn check_input<T: Element>(g: &ArchGraph, x: &Tensor<T>) -> Result<()> {
    let [input] = g.inputs[..] else {
        return Err(Error::Invalid(format!("graph has {} inputs; pass them by name", g.inputs.len())));
    };
    let want = g.nodes[input].channels;
    // The divisor is in image pixels; an input already at stride 2^l is
    // that much smaller.
    let d = (required_divisor(g) >> g.nodes[input].level.unwrap_or(0)).max(1);
    match *x.shape() {
        [_, c, h, w] if c == want && h % d == 0 && w % d == 0 => Ok(()),
        _ => Err(Error::Shape(format!(
            "input {:?} must be (N, {want}, H, W) with H and W divisible by {d}",
            x.shape()
        ))),
    }
}

/// Outputs of the graph keyed by output name.
pub fn forward<T: Element>(g: &ArchGraph, store: &ParamStore<T>, x: &Tensor<T>) -> Result<BTreeMap<String, Tensor<T>>> {
    check_input(g, x)?;
    let name = g.input_names().remove(0);
    forward_inputs(g, store, &BTreeMap::from([(name, x.detached())]))
}

pub fn forward_inputs<T: Element>(
    g: &ArchGraph,
    store: &ParamStore<T>,
    inputs: &BTreeMap<String, Tensor<T>>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, store, false);
    let ins = inputs.iter().map(|(k, t)| (k.clone(), tape.leaf(t.detached()))).collect();
    let vars = run_graph(&mut tape, g, &params, &ins)?;
    Ok(output_values(g, &tape, &vars))
}

/// Value of a single named node, for tests and inspection.
pub fn node_value<T: Element>(g: &ArchGraph, store: &ParamStore<T>, x: &Tensor<T>, node: NodeId) -> Result<Tensor<T>> {
    check_input(g, x)?;
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, store, false);
    let name = g.input_names().remove(0);
    let ins = BTreeMap::from([(name, tape.leaf(x.detached()))]);
    let vars = run_graph(&mut tape, g, &params, &ins)?;
    Ok(tape.value(vars[node]).detached())
}

pub fn output_values<T: Element>(g: &ArchGraph, tape: &Tape<T>, vars: &[Var]) -> BTreeMap<String, Tensor<T>> {
    g.outputs
        .iter()
        .filter_map(|&o| match &g.nodes[o].op {
            Op::Output { name } => Some((name.clone(), tape.value(vars[o]).detached())),
            _ => None,
        })
        .collect()
}
