//! Depth-evaluation metrics, reflective/non-reflective region splits and
//! mask IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{DEPTH_MAX, DEPTH_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

/// Metrics over pixels where `valid` is nonzero, with `gt` clamped to
/// `[d_min, d_max]`. Predictions are used as given.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, valid: &Tensor, d_min: f64, d_max: f64) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() || valid.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "metrics: pred {}, gt {}, valid {}",
            pred.shape(),
            gt.shape(),
            valid.shape()
        )));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
        if m == 0.0 {
            continue;
        }
        if !(g > 0.0) || !(p > 0.0) {
            return Err(Error::InvalidArgument(format!("metrics: non-positive depth (pred {p}, gt {g})")));
        }
        let g = g.clamp(d_min, d_max);
        let d = p - g;
        n += 1;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        let mut threshold = 1.25;
        for hit in &mut hits {
            if ratio < threshold {
                *hit += 1;
            }
            threshold *= 1.25;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("metrics: no valid pixels".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        a1: hits[0] as f64 / nf,
        a2: hits[1] as f64 / nf,
        a3: hits[2] as f64 / nf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSplit {
    pub reflective: Option<DepthMetrics>,
    pub non_reflective: Option<DepthMetrics>,
}

/// Metrics restricted to the reflective and non-reflective parts of the
/// valid set; a side with no pixels is `None`.
pub fn region_split(pred: &Tensor, gt: &Tensor, valid: &Tensor, gt_reflective: &Tensor) -> Result<RegionSplit> {
    let side = |want: bool| -> Result<Option<DepthMetrics>> {
        let region = valid.zip_map(gt_reflective, |v, r| if v != 0.0 && (r != 0.0) == want { 1.0 } else { 0.0 })?;
        if region.count_nonzero() == 0 {
            return Ok(None);
        }
        depth_metrics(pred, gt, &region, DEPTH_MIN, DEPTH_MAX).map(Some)
    };
    Ok(RegionSplit { reflective: side(true)?, non_reflective: side(false)? })
}

/// `|m & gt| / |m | gt|`, or 1 when both masks are empty.
pub fn mask_iou(m: &Tensor, gt: &Tensor) -> Result<f64> {
    if m.shape() != gt.shape() {
        return Err(Error::Shape(format!("mask_iou: {} vs {}", m.shape(), gt.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0.0, b != 0.0);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
