//! Correspondence quality measures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FmapError, Result};
use crate::pointmap_transfer::FlowField;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

fn check_pairs(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.is_empty() {
        return Err(FmapError::Argument("no keypoints to evaluate".into()));
    }
    if pred.len() != gt.len() {
        return Err(FmapError::Argument(format!(
            "{} predictions for {} ground-truth keypoints",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Percentage of predictions within `alpha · max(h, w)` of the ground truth.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], dims: (usize, usize), alpha: f64) -> Result<f64> {
    check_pairs(pred, gt)?;
    if !(alpha > 0.0) {
        return Err(FmapError::Argument(format!("alpha must be positive, got {alpha}")));
    }
    let threshold = alpha * dims.0.max(dims.1) as f64;
    let hits = pred.iter().zip(gt).filter(|(p, g)| dist(**p, **g) <= threshold).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Mean endpoint error over the pixels where `mask` is set (all when `None`).
pub fn epe(flow: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    if (flow.height, flow.width) != (gt.height, gt.width) {
        return Err(FmapError::Shape(format!(
            "flow is {}x{}, ground truth is {}x{}",
            flow.height, flow.width, gt.height, gt.width
        )));
    }
    if let Some(m) = mask {
        if m.len() != flow.data.len() {
            return Err(FmapError::Shape("mask does not match the flow".into()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (a, b)) in flow.data.iter().zip(&gt.data).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sum += dist(*a, *b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(FmapError::Argument("mask selects no pixels".into()));
    }
    Ok(sum / count as f64)
}

/// Mean over positions with both forward neighbours of
/// `½(‖u(x+1,y) − u(x,y)‖ + ‖u(x,y+1) − u(x,y)‖)`.
pub fn smoothness(flow: &FlowField) -> Result<f64> {
    let (h, w) = (flow.height, flow.width);
    if h < 2 || w < 2 {
        return Err(FmapError::Argument(format!("smoothness needs at least a 2x2 flow, got {h}x{w}")));
    }
    let mut sum = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let u = flow.at(y, x);
            sum += 0.5 * (dist(flow.at(y, x + 1), u) + dist(flow.at(y + 1, x), u));
        }
    }
    Ok(sum / ((h - 1) * (w - 1)) as f64)
}

/// Mean squared Euclidean keypoint error.
pub fn mse_keypoints(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let (dx, dy) = (p[0] - g[0], p[1] - g[1]);
            dx * dx + dy * dy
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Follow the flow from each source keypoint `[x, y]`.
pub fn warp_keypoints(flow: &FlowField, sources: &[[f64; 2]]) -> Vec<[f64; 2]> {
    sources
        .iter()
        .map(|s| {
            let v = flow.sample(s[1], s[0]);
            [s[0] + v[0], s[1] + v[1]]
        })
        .collect()
}

/// Conventions every evaluation report states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConventions {
    pub resolution: String,
    pub pck_threshold: String,
    pub smoothness: String,
    pub epe_mask: String,
}

impl Default for EvalConventions {
    fn default() -> Self {
        EvalConventions {
            resolution: "image".into(),
            pck_threshold: "alpha * max(h, w)".into(),
            smoothness: "mean of 0.5*(|u(x+1,y)-u(x,y)| + |u(x,y+1)-u(x,y)|) over positions with both forward neighbours".into(),
            epe_mask: "all pixels unless a mask is given".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub keypoints: usize,
    pub flow_pixels: usize,
    pub masked_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by alpha rendered as text, e.g. `"0.05"`.
    pub pck: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe: Option<f64>,
    pub smoothness: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    pub threshold_dims: (usize, usize),
    pub counts: EvalCounts,
    pub conventions: EvalConventions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn pck_examples() {
        let gt = [[10.0, 10.0], [50.0, 50.0]];
        assert_eq!(pck(&gt, &gt, (80, 100), 0.05).unwrap(), 100.0);
        let pred = [[13.0, 14.0], [50.0, 70.0]];
        assert_eq!(pck(&pred, &gt, (80, 100), 0.1).unwrap(), 50.0);
        assert!(pck(&[], &[], (10, 10), 0.1).is_err());
        assert!(pck(&gt, &gt, (10, 10), 0.0).is_err());
        assert!(pck(&gt[..1], &gt, (10, 10), 0.1).is_err());
    }

    #[test]
    fn epe_examples() {
        let a = FlowField::constant(3, 4, [1.0, -2.0]);
        assert_eq!(epe(&a, &a, None).unwrap(), 0.0);
        let b = FlowField::constant(3, 4, [4.0, 2.0]);
        assert_eq!(epe(&a, &b, None).unwrap(), 5.0);
        let mut mask = vec![false; 12];
        assert!(epe(&a, &b, Some(&mask)).is_err());
        mask[3] = true;
        assert_eq!(epe(&a, &b, Some(&mask)).unwrap(), 5.0);
        assert!(epe(&a, &FlowField::constant(4, 3, [0.0; 2]), None).is_err());
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness(&FlowField::constant(5, 5, [3.0, 1.0])).unwrap(), 0.0);
        let ramp = |h: usize, w: usize, s: f64| {
            FlowField::new(h, w, (0..h * w).map(|i| [s * (i % w) as f64, 0.0]).collect()).unwrap()
        };
        assert_eq!(smoothness(&ramp(4, 6, 1.0)).unwrap(), 0.5);
        assert_eq!(smoothness(&ramp(4, 6, 2.0)).unwrap(), 1.0);
        assert_eq!(smoothness(&ramp(9, 13, 1.0)).unwrap(), 0.5);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_keypoints(&[[1.0, 2.0]], &[[1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(mse_keypoints(&[[3.0, 4.0]], &[[0.0, 0.0]]).unwrap(), 25.0);
        let pred = [[3.0, 4.0], [-4.0, 3.0]];
        let gt = [[0.0, 0.0]; 2];
        let e = mse_keypoints(&pred, &gt).unwrap();
        let flow = FlowField::new(1, 2, pred.to_vec()).unwrap();
        let zero = FlowField::constant(1, 2, [0.0, 0.0]);
        assert_relative_eq!(e, epe(&flow, &zero, None).unwrap().powi(2));
    }

    #[test]
    fn warping_follows_flow() {
        let f = FlowField::new(2, 2, vec![[1.0, 0.0], [2.0, 0.0], [1.0, 1.0], [2.0, 1.0]]).unwrap();
        assert_eq!(warp_keypoints(&f, &[[0.5, 0.5]]), vec![[0.5 + 1.5, 0.5 + 0.5]]);
    }

    proptest! {
        #[test]
        fn pck_monotone_in_alpha(
            pts in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64, -30.0..30.0f64, -30.0..30.0f64), 1..20),
            a in 0.001..1.0f64,
            b in 0.001..1.0f64,
        ) {
            let gt: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let pred: Vec<[f64; 2]> = pts.iter().map(|p| [p.0 + p.2, p.1 + p.3]).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(pck(&pred, &gt, (100, 80), lo).unwrap() <= pck(&pred, &gt, (100, 80), hi).unwrap());
            prop_assert_eq!(pck(&pred, &gt, (100, 80), 1e6).unwrap(), 100.0);
        }

        #[test]
        fn errors_ignore_translation(
            pts in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..10),
            tx in -100.0..100.0f64,
            ty in -100.0..100.0f64,
        ) {
            let gt: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let pred: Vec<[f64; 2]> = pts.iter().map(|p| [p.0 + p.2, p.1 + p.3]).collect();
            let shift = |v: &[[f64; 2]]| v.iter().map(|p| [p[0] + tx, p[1] + ty]).collect::<Vec<_>>();
            let a = mse_keypoints(&pred, &gt).unwrap();
            let b = mse_keypoints(&shift(&pred), &shift(&gt)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }
}
