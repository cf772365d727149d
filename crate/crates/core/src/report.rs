//! Scoring of reference-frame depth against a dataset's ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{depth_metrics, mask_iou, region_split, DepthMetrics};
use crate::photometric::synthesize_view;
use crate::synthscene::Dataset;
use crate::tensor::Tensor;
use crate::trainer::{LossMode, Objective, TrainConfig};
use crate::{DEPTH_MAX, DEPTH_MIN};

/// Pixels of frame `r` that some other frame sees under the ground-truth
/// depth; the rest carry no photometric evidence.
pub fn coverage_mask(ds: &Dataset, r: usize) -> Result<Tensor> {
    let gt = ds.frames[r]
        .gt_depth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("frame {r} has no ground-truth depth")))?;
    let mut covered = Tensor::zeros(ds.shape());
    for s in (0..ds.frames.len()).filter(|&s| s != r) {
        let syn = synthesize_view(&ds.frames[s].image, gt, &ds.intrinsics, &ds.relative_pose(r, s))?;
        covered = covered.zip_map(&syn.validity, |a, b| if a != 0.0 || b != 0.0 { 1.0 } else { 0.0 })?;
    }
    Ok(covered)
}

/// Localization of one (reference 0, source) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLocalization {
    pub source: usize,
    pub delta: f64,
    pub reflective_fraction: f64,
    /// IoU of `M_r` with the ground-truth mirror restricted to the pair's
    /// valid pixels; absent without a ground-truth mask.
    pub mask_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Metrics of frame 0 over covered pixels.
    pub global: DepthMetrics,
    pub reflective: Option<DepthMetrics>,
    pub non_reflective: Option<DepthMetrics>,
    /// Mean predicted depth over covered mirror pixels.
    pub mirror_mean_depth: Option<f64>,
    pub covered_pixels: usize,
    pub pairs: Vec<PairLocalization>,
}

impl EvalReport {
    pub fn mean_mask_iou(&self) -> Option<f64> {
        let v: Vec<f64> = self.pairs.iter().filter_map(|p| p.mask_iou).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Scores per-frame depths (frame 0 is evaluated) and localizes reflective
/// pixels with the configured margin rule.
pub fn evaluate(ds: &Dataset, depths: &[Tensor], cfg: &TrainConfig) -> Result<EvalReport> {
    let gt = ds.frames[0]
        .gt_depth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("frame 0 has no ground-truth depth".into()))?;
    if depths.len() != ds.frames.len() {
        return Err(Error::Shape(format!("{} depth maps for {} frames", depths.len(), ds.frames.len())));
    }
    let valid = coverage_mask(ds, 0)?;
    let pred = &depths[0];
    let global = depth_metrics(pred, gt, &valid, DEPTH_MIN, DEPTH_MAX)?;
    let gt_mask = ds.frames[0].gt_reflective.as_ref();
    let (reflective, non_reflective, mirror_mean_depth) = match gt_mask {
        Some(m) => {
            let split = region_split(pred, gt, &valid, m)?;
            let region = valid.mask_and(m)?;
            let n = region.count_nonzero();
            let sum: f64 = pred.data().iter().zip(region.data()).filter(|(_, &r)| r != 0.0).map(|(&d, _)| d).sum();
            (split.reflective, split.non_reflective, (n > 0).then(|| sum / n as f64))
        }
        None => (None, None, None),
    };

    let loc_cfg = TrainConfig { mode: LossMode::Triplet, ..cfg.clone() };
    let (_, states) = Objective::new(ds, &loc_cfg)?.evaluate(depths)?;
    let mut pairs = Vec::new();
    for p in states.iter().filter(|p| p.reference == 0) {
        let iou = match gt_mask {
            Some(m) => Some(mask_iou(&p.mask.mask, &m.mask_and(&p.errors.validity)?)?),
            None => None,
        };
        pairs.push(PairLocalization {
            source: p.source,
            delta: p.margin.delta,
            reflective_fraction: p.mask.fraction(&p.errors.validity),
            mask_iou: iou,
        });
    }
    Ok(EvalReport {
        global,
        reflective,
        non_reflective,
        mirror_mean_depth,
        covered_pixels: valid.count_nonzero(),
        pairs,
    })
}
