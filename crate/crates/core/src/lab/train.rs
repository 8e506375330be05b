//! AdamW training of a segmentation graph on synthetic scenes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cednet_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::build::{attach_seg_head, build_cednet};
use crate::config::{ArchConfig, Mode};
use crate::error::{Error, Result};
use crate::executor::{bind_params, check_input, init_params, run_graph, ParamStore};
use crate::graph::ArchGraph;
use crate::lab::metrics::{seg_metrics, SegMetrics};
use crate::lab::scene::{make_batch, DataSpec, Split, SyntheticScene, NUM_CLASSES};

/// Number of trailing steps averaged into [`TrainRun::final_loss`].
pub const FINAL_LOSS_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation metrics every this many steps, starting at step 0.
    pub eval_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Common channel width inside the segmentation head.
    pub head_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            steps: 500,
            batch_size: 8,
            seed: 0,
            eval_interval: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            head_width: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("train config: {m}")));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive");
        }
        if self.eval_interval == 0 || self.head_width == 0 {
            return bad("eval_interval and head_width must be >= 1");
        }
        Ok(())
    }

    /// Cosine decay from `lr` at step 0 towards zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
    }
}

/// Dense CEDNet with the segmentation head attached.
pub fn build_seg_model(arch: &ArchConfig, head_width: usize) -> Result<ArchGraph> {
    let backbone = build_cednet(&arch.clone().with_mode(Mode::Dense))?;
    attach_seg_head(&backbone, NUM_CLASSES, head_width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub pixel_acc: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    /// Training loss before each update.
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricRecord>,
    pub initial_loss: f64,
    /// Mean of the last [`FINAL_LOSS_WINDOW`] losses.
    pub final_loss: f64,
}

impl TrainRun {
    /// `step,loss,pixel_acc,mIoU`; metric columns are empty between
    /// evaluations.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,loss,pixel_acc,mIoU\n");
        let mut evals = self.metrics.iter().peekable();
        for (step, loss) in self.losses.iter().enumerate() {
            let _ = write!(s, "{step},{loss}");
            match evals.peek() {
                Some(m) if m.step == step => {
                    let _ = writeln!(s, ",{},{}", m.pixel_acc, m.miou);
                    evals.next();
                }
                _ => s.push_str(",,\n"),
            }
        }
        s
    }
}

/// Decoupled weight decay applied to tensors of rank >= 2 only.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Vec<f32>>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (key, param) in store.iter_mut() {
            let Some(g) = grads.get(key) else { continue };
            let decay = if param.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = (b1 * *mi as f64 + (1.0 - b1) * gi) as f32;
                *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
                let mhat = *mi as f64 / c1;
                let vhat = *vi as f64 / c2;
                let pv = *p as f64;
                *p = (pv - lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + decay * pv)) as f32;
            }
        }
    }
}

/// Cross-entropy of the graph's `logits` output on a batch, plus gradients
/// of every parameter when `with_grads` is set.
pub fn loss_and_grads(
    g: &ArchGraph,
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    with_grads: bool,
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    check_input(g, x)?;
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, store, with_grads);
    let input = tape.leaf(x.detached());
    let vars = run_graph(&mut tape, g, &params, &BTreeMap::from([(g.input_names().remove(0), input)]))?;
    let logits = logits_var(g, &vars)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item()? as f64;
    let mut grads = BTreeMap::new();
    if with_grads {
        tape.backward(loss)?;
        for (k, &v) in &params {
            if let Some(gr) = tape.grad(v) {
                grads.insert(k.clone(), gr.to_vec());
            }
        }
    }
    Ok((value, grads))
}

pub(crate) fn logits_var(g: &ArchGraph, vars: &[Var]) -> Result<Var> {
    g.output("logits")
        .map(|o| vars[o])
        .ok_or_else(|| Error::Invalid("graph has no logits output".into()))
}

/// Per-pixel argmax class of the `logits` output, scenes in order.
pub fn predict(g: &ArchGraph, store: &ParamStore<f32>, scenes: &[SyntheticScene], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&SyntheticScene> = chunk.iter().collect();
        let (x, _) = make_batch(&refs)?;
        let logits = crate::executor::forward(g, store, &x)?
            .remove("logits")
            .ok_or_else(|| Error::Invalid("graph has no logits output".into()))?;
        let (n, k, h, w) = logits.dims4("logits")?;
        let d = logits.data();
        for b in 0..n {
            for p in 0..h * w {
                let mut best = 0;
                for c in 1..k {
                    if d[(b * k + c) * h * w + p] > d[(b * k + best) * h * w + p] {
                        best = c;
                    }
                }
                out.push(best);
            }
        }
    }
    Ok(out)
}

pub fn evaluate(g: &ArchGraph, store: &ParamStore<f32>, scenes: &[SyntheticScene]) -> Result<SegMetrics> {
    let pred = predict(g, store, scenes, 8)?;
    let gt: Vec<usize> = scenes.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok(seg_metrics(&pred, &gt, NUM_CLASSES))
}

/// Trains from a fresh initialisation seeded by `cfg.seed`.
pub fn train(g: &ArchGraph, data: &DataSpec, cfg: &TrainConfig) -> Result<(TrainRun, ParamStore<f32>)> {
    let train_set = data.scenes(Split::Train)?;
    let val_set = data.scenes(Split::Val)?;
    train_on(g, init_params(g, cfg.seed), &train_set, &val_set, cfg)
}

/// Trains `store` in place on a fixed scene list, cycling through it in
/// order.
pub fn train_on(
    g: &ArchGraph,
    mut store: ParamStore<f32>,
    train_set: &[SyntheticScene],
    val_set: &[SyntheticScene],
    cfg: &TrainConfig,
) -> Result<(TrainRun, ParamStore<f32>)> {
    cfg.validate()?;
    store.check(g)?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut opt = AdamW::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut metrics = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<&SyntheticScene> =
            (0..cfg.batch_size).map(|j| &train_set[(step * cfg.batch_size + j) % train_set.len()]).collect();
        let (x, labels) = make_batch(&batch)?;
        let (loss, grads) = loss_and_grads(g, &store, &x, &labels, true)?;
        let initial = losses.first().copied().unwrap_or(loss);
        if !loss.is_finite() || loss > 10.0 * initial {
            return Err(Error::Diverged { step, loss, initial });
        }
        losses.push(loss);
        if !val_set.is_empty() && (step % cfg.eval_interval == 0) {
            let m = evaluate(g, &store, val_set)?;
            metrics.push(MetricRecord { step, loss, pixel_acc: m.pixel_acc, miou: m.miou });
        }
        opt.update(&mut store, &grads, cfg.lr_at(step), cfg);
    }
    let tail = &losses[losses.len().saturating_sub(FINAL_LOSS_WINDOW)..];
    let run = TrainRun {
        config: cfg.clone(),
        initial_loss: losses[0],
        final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        losses,
        metrics,
    };
    Ok((run, store))
}
