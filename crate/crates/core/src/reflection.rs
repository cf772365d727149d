//! Reflective-region localization and the reflection-aware triplet loss.
//!
//! For a reference/source pair, the source is warped into the reference view
//! (`I_s2r`, through the reference depth) and the reference is warped into the
//! source view (`I_r2s`, through the source depth). Two errors follow:
//!
//! * `E+ = P(I_s2r, I_ref)`: same viewpoint, small when the depth is right.
//! * `E- = P(I_s2r, I_r2s)`: different viewpoints, normally large.
//!
//! Reflected content has a smaller apparent disparity than the surface it
//! sits on, so on mirrors `E-` collapses towards `E+`. Pixels with
//! `E- - E+ <= delta` are flagged reflective, and there the loss becomes
//! `hinge(E+ - E- + delta)`, which pushes `E-` up instead of only pulling
//! `E+` down.

use serde::Serialize;

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{invert_pose, Intrinsics, Pose};
use crate::photometric::{photometric_raw_node, synthesize_node, LossConfig};
use crate::tensor::{Shape, Tensor};

/// Value substituted for invalid pixels before a per-pixel minimum over
/// sources; never selected where any source is valid.
const INVALID_FILL: f64 = 1e6;

/// Positive/negative photometric errors of one reference/source pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPair {
    pub e_pos: Tensor,
    pub e_neg: Tensor,
    /// Joint warp validity of both syntheses, intersected with the auto-mask.
    pub validity: Tensor,
}

/// Graph form of [`ErrorPair`].
#[derive(Debug, Clone)]
pub struct ErrorPairNodes {
    pub e_pos: NodeId,
    pub e_neg: NodeId,
    pub validity: Tensor,
}

impl ErrorPairNodes {
    pub fn values(&self, g: &Graph) -> ErrorPair {
        ErrorPair {
            e_pos: g.value(self.e_pos).clone(),
            e_neg: g.value(self.e_neg).clone(),
            validity: self.validity.clone(),
        }
    }
}

/// Unmasked cross-view errors and the warp validity of each synthesis.
#[derive(Debug, Clone)]
pub struct RawCrossView {
    /// The source warped into the reference view.
    pub s2r: NodeId,
    pub e_pos: NodeId,
    pub e_neg: NodeId,
    /// Validity of `I_s2r` at each reference pixel.
    pub valid_s2r: Tensor,
    /// Validity of `I_r2s` at each source pixel.
    pub valid_r2s: Tensor,
}

impl RawCrossView {
    pub fn joint_validity(&self) -> Tensor {
        self.valid_s2r.mask_and(&self.valid_r2s).expect("same shape")
    }

    /// Gates both errors by the joint validity and the auto-mask.
    pub fn finish(&self, g: &mut Graph, principled: &Tensor) -> Result<ErrorPairNodes> {
        let validity = self.joint_validity().mask_and(principled)?;
        let e_pos = g.gate(&validity, self.e_pos)?;
        let e_neg = g.gate(&validity, self.e_neg)?;
        Ok(ErrorPairNodes { e_pos, e_neg, validity })
    }
}

/// Records both syntheses and the unmasked errors `E+` and `E-`.
#[allow(clippy::too_many_arguments)]
pub fn cross_view_raw(
    g: &mut Graph,
    i_ref: NodeId,
    i_src: NodeId,
    d_ref: NodeId,
    d_src: NodeId,
    k: &Intrinsics,
    pose_r2s: &Pose,
    cfg: &LossConfig,
) -> Result<RawCrossView> {
    let shapes = [g.shape(i_ref), g.shape(i_src)];
    if shapes[0] != shapes[1] {
        return Err(Error::Shape(format!("cross-view images {} and {}", shapes[0], shapes[1])));
    }
    let depth_shape = shapes[0].with_channels(1);
    if g.shape(d_ref) != depth_shape || g.shape(d_src) != depth_shape {
        return Err(Error::Shape(format!(
            "cross-view depths {} and {} for images {}",
            g.shape(d_ref),
            g.shape(d_src),
            shapes[0]
        )));
    }
    let pose_s2r = invert_pose(pose_r2s);
    let (s2r, valid_s2r) = synthesize_node(g, i_src, d_ref, k, pose_r2s)?;
    let (r2s, valid_r2s) = synthesize_node(g, i_ref, d_src, k, &pose_s2r)?;
    let e_pos = photometric_raw_node(g, i_ref, s2r, cfg)?;
    let e_neg = photometric_raw_node(g, r2s, s2r, cfg)?;
    Ok(RawCrossView { s2r, e_pos, e_neg, valid_s2r, valid_r2s })
}

/// Unmasked identity error `P(I_ref, I_src)` used by the auto-mask.
pub fn identity_error(i_ref: &Tensor, i_src: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let (r, s) = (g.constant(i_ref.clone()), g.constant(i_src.clone()));
    let e = photometric_raw_node(&mut g, r, s, cfg)?;
    Ok(g.value(e).clone())
}

/// Single-pair auto-mask: 1 where the warped source explains the reference
/// strictly better than the unwarped source does.
pub fn pair_auto_mask(raw_e_pos: &Tensor, identity: &Tensor) -> Result<Tensor> {
    raw_e_pos.zip_map(identity, |s, i| if s < i { 1.0 } else { 0.0 })
}

/// Cross-view error pair for one reference/source pair.
///
/// `principled` is the auto-mask to apply; `None` derives it from this pair.
#[allow(clippy::too_many_arguments)]
pub fn cross_view_errors(
    i_ref: &Tensor,
    i_src: &Tensor,
    d_ref: &Tensor,
    d_src: &Tensor,
    k: &Intrinsics,
    pose_r2s: &Pose,
    cfg: &LossConfig,
    principled: Option<&Tensor>,
) -> Result<ErrorPair> {
    k.validate(i_ref.width(), i_ref.height())?;
    for d in [d_ref, d_src] {
        if !d.data().iter().all(|&v| v > 0.0) {
            return Err(Error::InvalidArgument("cross_view_errors: depths must be positive".into()));
        }
    }
    let mut g = Graph::new();
    let nodes = [i_ref, i_src, d_ref, d_src].map(|t| g.constant(t.clone()));
    let raw = cross_view_raw(&mut g, nodes[0], nodes[1], nodes[2], nodes[3], k, pose_r2s, cfg)?;
    let mask = match principled {
        Some(m) => m.clone(),
        None => pair_auto_mask(g.value(raw.e_pos), &identity_error(i_ref, i_src, cfg)?)?,
    };
    let pair = raw.finish(&mut g, &mask)?;
    Ok(pair.values(&g))
}

/// How the margin was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Margin {
    pub delta: f64,
    /// False when too few valid pixels forced the fixed fallback.
    pub adaptive: bool,
}

/// Quantile by linear interpolation between order statistics at position
/// `q * (n - 1)` of the sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn valid_values(t: &Tensor, validity: &Tensor) -> Vec<f64> {
    t.data().iter().zip(validity.data()).filter(|(_, &m)| m != 0.0).map(|(&x, _)| x).collect()
}

/// Same value as [`quantile_sorted`] on the sorted input, found by
/// selection; `values` is reordered.
pub fn quantile_select(values: &mut [f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let (_, &mut at_lo, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let at_hi = upper.iter().copied().min_by(f64::total_cmp).unwrap_or(at_lo);
    at_lo + (at_hi - at_lo) * (pos - lo as f64)
}

/// Minimum number of valid pixels for the quartile rule.
pub const MIN_MARGIN_PIXELS: usize = 4;

/// `delta = max(0, Q3(E-) - Q1(E+))` over valid pixels, or `fallback` when
/// fewer than four pixels are valid.
pub fn adaptive_margin(pair: &ErrorPair, fallback: f64) -> Margin {
    let mut pos = valid_values(&pair.e_pos, &pair.validity);
    if pos.len() < MIN_MARGIN_PIXELS {
        return Margin { delta: fallback, adaptive: false };
    }
    let mut neg = valid_values(&pair.e_neg, &pair.validity);
    let delta = (quantile_select(&mut neg, 0.75) - quantile_select(&mut pos, 0.25)).max(0.0);
    Margin { delta, adaptive: true }
}

/// Per-pixel reflective indicator and the margin that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectiveMask {
    pub mask: Tensor,
    pub delta: f64,
}

impl ReflectiveMask {
    /// Fraction of valid pixels flagged reflective.
    pub fn fraction(&self, validity: &Tensor) -> f64 {
        let valid = validity.count_nonzero();
        if valid == 0 {
            0.0
        } else {
            self.mask.count_nonzero() as f64 / valid as f64
        }
    }
}

/// `M_r = 1` where `E- - E+ <= delta` (inclusive), 0 elsewhere and on
/// invalid pixels.
pub fn reflective_mask(pair: &ErrorPair, delta: f64) -> Result<ReflectiveMask> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be >= 0, got {delta}")));
    }
    let shape = pair.e_pos.shape();
    let data = (0..shape.len())
        .map(|i| {
            let ok = pair.validity.data()[i] != 0.0 && pair.e_neg.data()[i] - pair.e_pos.data()[i] <= delta;
            if ok {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(ReflectiveMask { mask: Tensor::from_vec(shape, data)?, delta })
}

/// Records `M_r ? hinge(E+ - E- + delta) : E+` per pixel.
pub fn triplet_map_node(g: &mut Graph, pair: &ErrorPairNodes, m: &ReflectiveMask) -> Result<NodeId> {
    let diff = g.sub(pair.e_pos, pair.e_neg)?;
    let shifted = g.affine(diff, 1.0, m.delta)?;
    let hinge = g.relu(shifted)?;
    g.select(&m.mask, hinge, pair.e_pos)
}

/// Triplet loss map and its mean over valid pixels.
pub fn triplet_loss(pair: &ErrorPair, m: &ReflectiveMask) -> Result<(Tensor, f64)> {
    let mut g = Graph::new();
    let nodes = ErrorPairNodes {
        e_pos: g.constant(pair.e_pos.clone()),
        e_neg: g.constant(pair.e_neg.clone()),
        validity: pair.validity.clone(),
    };
    let map = triplet_map_node(&mut g, &nodes, m)?;
    let mean = g.masked_mean(map, &pair.validity)?;
    Ok((g.value(map).clone(), g.value(mean).item()))
}

/// Per-pixel minimum of per-source loss maps over the sources valid at that
/// pixel, then the mean over pixels with at least one valid source.
pub fn multi_source_combine_node(g: &mut Graph, maps: &[(NodeId, Tensor)]) -> Result<NodeId> {
    let first =
        maps.first().ok_or_else(|| Error::InvalidArgument("multi-source combine needs at least one source".into()))?;
    let shape: Shape = g.shape(first.0);
    let mut any_valid = Tensor::zeros(shape);
    let mut filled = Vec::with_capacity(maps.len());
    for (map, valid) in maps {
        let fill = g.constant(Tensor::full(shape, INVALID_FILL));
        filled.push(g.select(valid, *map, fill)?);
        any_valid = any_valid.zip_map(valid, |a, b| if a != 0.0 || b != 0.0 { 1.0 } else { 0.0 })?;
    }
    let best = if filled.len() == 1 { filled[0] } else { g.min(&filled)? };
    g.masked_mean(best, &any_valid)
}

pub fn multi_source_combine(maps: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut g = Graph::new();
    let nodes: Vec<(NodeId, Tensor)> = maps.iter().map(|(m, v)| (g.constant(m.clone()), v.clone())).collect();
    let out = multi_source_combine_node(&mut g, &nodes)?;
    Ok(g.value(out).item())
}
