//! Central finite-difference check of every parameter gradient of a graph,
//! in 64-bit.

use std::collections::BTreeMap;

use cednet_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{apply_node, bind_params, forward_inputs, init_params_with_std, param_key, run_graph, ParamStore};
use crate::graph::{ArchGraph, NodeId, Op};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Analytic values below this are compared absolutely.
    pub abs_floor: f64,
    /// Weight std; larger than the training default so every path carries
    /// signal well above round-off.
    pub init_std: f64,
    pub seed: u64,
    /// Square input side in pixels.
    pub input_size: usize,
    pub batch: usize,
    /// Fourth-order central stencil instead of the two-point one.
    pub five_point: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { eps: 1e-3, tolerance: 1e-4, abs_floor: 1e-8, init_std: 0.3, seed: 0, input_size: 32, batch: 1, five_point: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_error: f64,
    /// `param[index]` of the worst element.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error, or absolute below `floor`.
pub fn grad_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < floor {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

struct Probe {
    order: Vec<NodeId>,
    inputs: BTreeMap<String, Tensor<f64>>,
    /// Fixed random weights per output; the loss is sum(out * r).
    weights: BTreeMap<String, Tensor<f64>>,
}

impl Probe {
    fn new(g: &ArchGraph, cfg: &GradcheckConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5);
        let mut inputs = BTreeMap::new();
        for &i in &g.inputs {
            let Op::Input { name, channels, level } = &g.nodes[i].op else { unreachable!("declared inputs are input nodes") };
            let side = cfg.input_size >> level;
            if side == 0 || side << level != cfg.input_size {
                return Err(Error::Shape(format!("input size {} does not reach stride 2^{level}", cfg.input_size)));
            }
            let shape = vec![cfg.batch, *channels, side, side];
            inputs.insert(name.clone(), Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)));
        }
        let outs = forward_inputs(g, &ParamStore::<f64>::new(0).with_graph_defaults(g), &inputs)?;
        let weights = outs
            .into_iter()
            .map(|(k, t)| (k, Tensor::from_fn(t.shape().to_vec(), |_| rng.gen_range(-1.0..1.0))))
            .collect();
        let order = g.topo_order().map_err(|id| Error::InvalidGraph(format!("cycle through node {id}")))?;
        Ok(Self { order, inputs, weights })
    }

    /// Loss contribution of the outputs downstream of `dirty`, re-evaluating
    /// only the dirty nodes on top of cached `base` values.
    fn partial_loss(&self, g: &ArchGraph, store: &ParamStore<f64>, base: &[Tensor<f64>], dirty: &[bool]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut vars: Vec<Option<Var>> = vec![None; g.nodes.len()];
        let mut params = BTreeMap::new();
        let no_inputs = BTreeMap::new();
        for node in g.nodes.iter().filter(|n| dirty[n.id]) {
            for (p, _) in node.op.param_shapes() {
                let key = param_key(&node.name, p);
                let t = store.get(&key).ok_or_else(|| Error::Invalid(format!("missing parameter {key}")))?;
                params.insert(key, tape.leaf(t.detached()));
            }
        }
        let mut loss = 0.0;
        for &id in &self.order {
            if !dirty[id] {
                continue;
            }
            let node = &g.nodes[id];
            let mut args = Vec::with_capacity(node.inputs.len());
            for &i in &node.inputs {
                let v = match vars[i] {
                    Some(v) => v,
                    None => {
                        let v = tape.leaf(base[i].detached());
                        vars[i] = Some(v);
                        v
                    }
                };
                args.push(v);
            }
            let v = apply_node(&mut tape, node, &args, &params, &no_inputs)?;
            vars[id] = Some(v);
            if let Op::Output { name } = &node.op {
                loss += tape.value(v).data().iter().zip(self.weights[name].data()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(loss)
    }

    fn analytic(&self, g: &ArchGraph, store: &ParamStore<f64>) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, store, true);
        let ins = self.inputs.iter().map(|(k, t)| (k.clone(), tape.leaf(t.detached()))).collect();
        let vars = run_graph(&mut tape, g, &params, &ins)?;
        let mut total = None;
        for &o in &g.outputs {
            let Op::Output { name } = &g.nodes[o].op else { continue };
            let r = tape.leaf(self.weights[name].detached());
            let prod = tape.mul(vars[o], r)?;
            let s = tape.sum(prod)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        tape.backward(total.ok_or_else(|| Error::Invalid("graph has no outputs".into()))?)?;
        Ok(params
            .iter()
            .map(|(k, &v)| {
                let gr = tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], |g| g.to_vec());
                (k.clone(), gr)
            })
            .collect())
    }
}

impl ParamStore<f64> {
    /// Shape-correct store used only to discover output shapes.
    fn with_graph_defaults(mut self, g: &ArchGraph) -> Self {
        for node in &g.nodes {
            for (p, shape) in node.op.param_shapes() {
                self.insert(crate::executor::param_key(&node.name, p), Tensor::zeros(shape));
            }
        }
        self
    }
}

fn descendants(g: &ArchGraph, order: &[NodeId], root: NodeId) -> Vec<bool> {
    let mut d = vec![false; g.nodes.len()];
    d[root] = true;
    for &id in order {
        if g.nodes[id].inputs.iter().any(|&i| d[i]) {
            d[id] = true;
        }
    }
    d
}

/// Checks a given store.
pub fn gradcheck_store(g: &ArchGraph, store: &ParamStore<f64>, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    store.check(g)?;
    let probe = Probe::new(g, cfg)?;
    let analytic = probe.analytic(g, store)?;
    let base = {
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, store, false);
        let ins = probe.inputs.iter().map(|(k, t)| (k.clone(), tape.leaf(t.detached()))).collect();
        let vars = run_graph(&mut tape, g, &params, &ins)?;
        vars.iter().map(|&v| tape.value(v).detached()).collect::<Vec<_>>()
    };
    let owners: BTreeMap<String, Vec<bool>> = g
        .nodes
        .iter()
        .flat_map(|n| n.op.param_shapes().into_iter().map(move |(p, _)| (param_key(&n.name, p), n.id)))
        .map(|(key, id)| (key, descendants(g, &probe.order, id)))
        .collect();
    let items: Vec<(&String, usize)> =
        store.iter().flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i))).collect();
    let errors: Vec<Result<f64>> = items
        .par_iter()
        .map(|&(key, i)| {
            let dirty = &owners[key];
            let mut s = store.clone();
            let original = s.get(key).expect("key from store").data()[i];
            let mut at = |delta: f64| {
                s.get_mut(key).expect("key").data_mut()[i] = original + delta;
                probe.partial_loss(g, &s, &base, dirty)
            };
            let h = cfg.eps;
            let numeric = if cfg.five_point {
                (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            Ok(grad_error(analytic[key][i], numeric, cfg.abs_floor))
        })
        .collect();
    let mut max_error = 0.0f64;
    let mut worst = String::new();
    for ((key, i), e) in items.iter().zip(errors) {
        let e = e?;
        if e > max_error || worst.is_empty() {
            max_error = max_error.max(e);
            worst = format!("{key}[{i}]");
        }
    }
    Ok(GradcheckReport { max_error, worst, checked: items.len(), tolerance: cfg.tolerance, passed: max_error < cfg.tolerance })
}

/// Fresh initialisation with `cfg.init_std`, then [`gradcheck_store`].
pub fn gradcheck(g: &ArchGraph, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let store = init_params_with_std::<f64>(g, cfg.seed, cfg.init_std);
    gradcheck_store(g, &store, cfg)
}
