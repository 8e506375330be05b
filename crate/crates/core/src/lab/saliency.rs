//! Input-gradient maps and important-region areas.
//!
//! The map is the absolute gradient of the task loss with respect to the
//! input pixels, reduced over RGB by taking the maximum. The important
//! region at threshold `t` is the set of pixels whose value exceeds `t`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cednet_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{bind_params, check_input, run_graph, ParamStore};
use crate::graph::ArchGraph;
use crate::lab::scene::{make_batch, SyntheticScene};
use crate::lab::train::logits_var;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResult {
    /// (H, W) gradient magnitudes.
    #[serde(skip)]
    pub map: Option<Tensor<f32>>,
    pub thresholds: Vec<f64>,
    /// Fraction of pixels above each threshold.
    pub areas: Vec<f64>,
    pub max_value: f64,
}

impl SaliencyResult {
    pub fn area_csv(&self) -> String {
        let mut s = String::from("threshold,area\n");
        for (t, a) in self.thresholds.iter().zip(&self.areas) {
            let _ = writeln!(s, "{t},{a}");
        }
        s
    }
}

/// max over channels of |d loss / d input| for one scene.
pub fn gradient_map(g: &ArchGraph, store: &ParamStore<f32>, scene: &SyntheticScene) -> Result<Tensor<f32>> {
    let (x, labels) = make_batch(&[scene])?;
    check_input(g, &x)?;
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, store, false);
    let input = tape.leaf(x.with_grad());
    let vars = run_graph(&mut tape, g, &params, &BTreeMap::from([(g.input_names().remove(0), input)]))?;
    let loss = tape.softmax_cross_entropy(logits_var(g, &vars)?, &labels)?;
    tape.backward(loss)?;
    let grad = tape.grad(input).ok_or_else(|| Error::Invalid("input received no gradient".into()))?;
    let plane = scene.height * scene.width;
    let map = (0..plane).map(|p| (0..3).map(|c| grad[c * plane + p].abs()).fold(0.0f32, f32::max)).collect();
    Ok(Tensor::from_vec(vec![scene.height, scene.width], map)?)
}

/// Fraction of map entries strictly greater than `t`.
pub fn important_area(map: &Tensor<f32>, t: f64) -> f64 {
    let above = map.data().iter().filter(|&&v| v as f64 > t).count();
    above as f64 / map.numel() as f64
}

pub fn area_curve(map: &Tensor<f32>, thresholds: &[f64]) -> Result<Vec<f64>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Invalid("thresholds must be sorted ascending".into()));
    }
    Ok(thresholds.iter().map(|&t| important_area(map, t)).collect())
}

/// `n` evenly spaced thresholds from 0 to the map maximum inclusive.
pub fn linear_thresholds(max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn saliency(
    g: &ArchGraph,
    store: &ParamStore<f32>,
    scene: &SyntheticScene,
    thresholds: &[f64],
) -> Result<SaliencyResult> {
    let map = gradient_map(g, store, scene)?;
    let areas = area_curve(&map, thresholds)?;
    let max_value = map.data().iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
    Ok(SaliencyResult { map: Some(map), thresholds: thresholds.to_vec(), areas, max_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_definition() {
        let map = Tensor::from_vec(vec![2, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(important_area(&map, 0.0), 1.0);
        assert_eq!(important_area(&map, 0.25), 0.5);
        assert_eq!(important_area(&map, 0.4 + 1e-6), 0.0);
        assert!(area_curve(&map, &[0.2, 0.1]).is_err());
        assert_eq!(linear_thresholds(1.0, 3), vec![0.0, 0.5, 1.0]);
    }
}
