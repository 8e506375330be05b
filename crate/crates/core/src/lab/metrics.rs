//! Pixel accuracy and intersection-over-union.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pixel_acc: f64,
    /// Mean over classes with a non-empty union.
    pub miou: f64,
    /// Per class; `None` where neither prediction nor ground truth has it.
    pub iou: Vec<Option<f64>>,
}

/// `confusion[gt][pred]` pixel counts.
pub fn confusion(pred: &[usize], gt: &[usize], classes: usize) -> Vec<Vec<u64>> {
    assert_eq!(pred.len(), gt.len(), "prediction and label maps differ in size");
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        m[g][p] += 1;
    }
    m
}

pub fn seg_metrics(pred: &[usize], gt: &[usize], classes: usize) -> SegMetrics {
    let m = confusion(pred, gt, classes);
    let total: u64 = m.iter().flatten().sum();
    let correct: u64 = (0..classes).map(|c| m[c][c]).sum();
    let iou: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let tp = m[c][c];
            let fn_: u64 = m[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..classes).map(|g| m[g][c]).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    SegMetrics {
        pixel_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        miou: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        iou,
    }
}

/// Scores of the predictor that always answers background.
pub fn constant_background(gt: &[usize], classes: usize) -> SegMetrics {
    seg_metrics(&vec![0; gt.len()], gt, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0, 1, 2, 3, 1, 0];
        let m = seg_metrics(&gt, &gt, 4);
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.pixel_acc, 1.0);
    }

    #[test]
    fn constant_background_on_known_map() {
        let gt = [0, 0, 0, 1, 1, 2, 0, 0];
        let m = constant_background(&gt, 4);
        assert_eq!(m.iou[0], Some(5.0 / 8.0));
        assert_eq!(m.iou[1], Some(0.0));
        assert_eq!(m.iou[3], None);
        assert!((m.miou - (5.0 / 8.0) / 3.0).abs() < 1e-15);
    }
}
