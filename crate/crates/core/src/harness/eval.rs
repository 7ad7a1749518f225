use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::DenseModel;

use super::data::SyntheticScene;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    /// Training loss per step; `loss[k]` belongs to step `k + 1`.
    pub loss: Vec<f32>,
    /// Mean IoU per pyramid level from the latest evaluation.
    pub iou: Vec<f64>,
    /// Set when a non-finite loss or logit was seen.
    pub non_finite: bool,
}

impl Metrics {
    /// Mean loss over the `window` steps ending at `step` (1-based), truncated
    /// at the start of training.
    pub fn moving_average(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.loss.len() || window == 0 {
            return None;
        }
        let start = step.saturating_sub(window);
        let slice = &self.loss[start..step];
        Some(slice.iter().map(|&l| l as f64).sum::<f64>() / slice.len() as f64)
    }

    pub fn mean_iou(&self) -> Option<f64> {
        if self.iou.is_empty() {
            None
        } else {
            Some(self.iou.iter().sum::<f64>() / self.iou.len() as f64)
        }
    }

    /// `step,loss` lines followed by a `#`-prefixed summary block.
    pub fn to_text(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.loss.iter().enumerate() {
            let _ = writeln!(out, "{},{l:.9}", i + 1);
        }
        let _ = writeln!(out, "# steps: {}", self.loss.len());
        let n = self.loss.len();
        if let (Some(a), Some(b)) = (self.moving_average(20.min(n), 50), self.moving_average(n, 50)) {
            let _ = writeln!(out, "# ma50 at step {}: {a:.6}", 20.min(n));
            let _ = writeln!(out, "# ma50 at step {n}: {b:.6}");
        }
        for (i, v) in self.iou.iter().enumerate() {
            let _ = writeln!(out, "# iou level {i}: {v:.4}");
        }
        let _ = writeln!(out, "# non_finite: {}", self.non_finite);
        out
    }
}

/// `|pred & gt| / |pred | gt|`, and 1 when both are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Thresholds logits at 0 and averages per-scene IoU for each level.
pub fn evaluate(model: &DenseModel<f32>, scenes: &[SyntheticScene]) -> Result<Metrics> {
    let first = scenes.first().ok_or_else(|| Error::usage("evaluate needs at least one scene"))?;
    let levels = first.masks.len();
    let mut sums = vec![0.0; levels];
    let mut non_finite = false;
    for scene in scenes {
        let logits = model.predict(&scene.image)?;
        if logits.len() != levels || scene.masks.len() != levels {
            return Err(Error::dim(
                "evaluate",
                format!("model has {} levels, scene has {}", logits.len(), scene.masks.len()),
            ));
        }
        for (l, (z, m)) in logits.iter().zip(&scene.masks).enumerate() {
            non_finite |= !z.all_finite();
            let pred: Vec<bool> = z.data().iter().map(|&v| v > 0.0).collect();
            let gt: Vec<bool> = m.data().iter().map(|&v| v > 0.5).collect();
            sums[l] += iou(&pred, &gt);
        }
    }
    Ok(Metrics {
        loss: Vec::new(),
        iou: sums.into_iter().map(|s| s / scenes.len() as f64).collect(),
        non_finite,
    })
}
