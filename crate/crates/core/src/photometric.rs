//! View synthesis, SSIM and the masked photometric error.
//!
//! Every function has a graph form (`*_node`), used by the trainer so depth
//! receives gradients, and a plain tensor form built on the same graph code so
//! both paths produce bit-identical values.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{warp_coords, Intrinsics, Pose, WarpField};
use crate::tensor::{Shape, Tensor};

/// Weights of the SSIM and L1 terms and the SSIM stabilizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha1: 0.85, alpha2: 0.15, ssim_c1: 0.01 * 0.01, ssim_c2: 0.03 * 0.03 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0 && self.alpha1 + self.alpha2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be >= 0 with a positive sum, got alpha1={} alpha2={}",
                self.alpha1, self.alpha2
            )));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::InvalidArgument("SSIM stabilizers must be positive".into()));
        }
        Ok(())
    }
}

/// A synthesized image and the pixels where its warp was valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub image: Tensor,
    pub validity: Tensor,
}

fn same_shape(what: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Per-pixel SSIM from 3x3 box statistics, averaged over channels.
pub fn ssim_node(g: &mut Graph, a: NodeId, b: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    same_shape("ssim", g.shape(a), g.shape(b))?;
    let mu_a = g.box3(a)?;
    let mu_b = g.box3(b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.box3(aa)?;
    let e_bb = g.box3(bb)?;
    let e_ab = g.box3(ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let n1 = g.affine(mu_ab, 2.0, cfg.ssim_c1)?;
    let n2 = g.affine(cov, 2.0, cfg.ssim_c2)?;
    let num = g.mul(n1, n2)?;
    let d1 = g.add(mu_aa, mu_bb)?;
    let d1 = g.affine(d1, 1.0, cfg.ssim_c1)?;
    let d2 = g.add(var_a, var_b)?;
    let d2 = g.affine(d2, 1.0, cfg.ssim_c2)?;
    let den = g.mul(d1, d2)?;
    let s = g.div(num, den)?;
    g.channel_mean(s)
}

/// `alpha1 (1 - SSIM) / 2 + alpha2 * mean_c |target - synth|`, unmasked.
pub fn photometric_raw_node(g: &mut Graph, target: NodeId, synth: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let s = ssim_node(g, target, synth, cfg)?;
    let ssim_term = g.affine(s, -0.5 * cfg.alpha1, 0.5 * cfg.alpha1)?;
    let diff = g.sub(target, synth)?;
    let l1 = g.abs(diff)?;
    let l1 = g.channel_mean(l1)?;
    let l1_term = g.scale(l1, cfg.alpha2)?;
    g.add(ssim_term, l1_term)
}

/// Photometric error with masked pixels forced to exactly zero.
pub fn photometric_node(
    g: &mut Graph,
    target: NodeId,
    synth: NodeId,
    mask: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let raw = photometric_raw_node(g, target, synth, cfg)?;
    g.gate(mask, raw)
}

/// Records `src` warped into the reference view through `depth`.
///
/// Returns the synthesized image node and the warp validity.
pub fn synthesize_node(
    g: &mut Graph,
    src: NodeId,
    depth: NodeId,
    k: &Intrinsics,
    pose_r2s: &Pose,
) -> Result<(NodeId, Tensor)> {
    let ss = g.shape(src);
    let ds = g.shape(depth);
    if (ss.height, ss.width) != (ds.height, ds.width) {
        return Err(Error::Shape(format!("synthesize: image {ss} with depth {ds}")));
    }
    let warp = warp_coords(g, depth, k, pose_r2s, (ss.height, ss.width))?;
    let image = g.gather(src, warp.u, warp.v)?;
    Ok((image, warp.validity))
}

pub fn bilinear_sample(src: &Tensor, field: &WarpField) -> Result<Tensor> {
    let cs = field.coords.shape();
    if cs.channels != 2 {
        return Err(Error::Shape(format!("warp coordinates must have 2 channels, got {cs}")));
    }
    let mut g = Graph::new();
    let s = g.constant(src.clone());
    let u = g.constant(field.coords.channel(0));
    let v = g.constant(field.coords.channel(1));
    let out = g.gather(s, u, v)?;
    Ok(g.value(out).clone())
}

pub fn ssim(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
    let s = ssim_node(&mut g, an, bn, cfg)?;
    Ok(g.value(s).clone())
}

pub fn photometric_error(target: &Tensor, synthesized: &Tensor, mask: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let (t, s) = (g.constant(target.clone()), g.constant(synthesized.clone()));
    let e = photometric_node(&mut g, t, s, mask, cfg)?;
    Ok(g.value(e).clone())
}

pub fn synthesize_view(src: &Tensor, depth: &Tensor, k: &Intrinsics, pose_r2s: &Pose) -> Result<Synthesis> {
    if !depth.data().iter().all(|&d| d > 0.0) {
        return Err(Error::InvalidArgument("synthesize_view: depth must be positive".into()));
    }
    let mut g = Graph::new();
    let s = g.constant(src.clone());
    let d = g.constant(depth.clone());
    let (img, validity) = synthesize_node(&mut g, s, d, k, pose_r2s)?;
    Ok(Synthesis { image: g.value(img).clone(), validity })
}

/// Per-pixel minimum over error maps; ties resolve to the earliest map.
pub fn min_reprojection(maps: &[Tensor]) -> Result<Tensor> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("min_reprojection needs at least one map".into()));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = maps.iter().map(|m| g.constant(m.clone())).collect();
    let m = g.min(&ids)?;
    Ok(g.value(m).clone())
}

/// Auto-mask from precomputed unmasked errors: 1 where the best valid
/// synthesized error beats the best identity (unwarped) error.
pub fn auto_mask_from_errors(synthesized: &[(Tensor, Tensor)], identity: &[Tensor]) -> Result<Tensor> {
    let first =
        synthesized.first().ok_or_else(|| Error::InvalidArgument("auto_mask needs at least one source".into()))?;
    if synthesized.len() != identity.len() {
        return Err(Error::InvalidArgument(format!(
            "auto_mask: {} synthesized views for {} sources",
            synthesized.len(),
            identity.len()
        )));
    }
    let shape = first.0.shape();
    for ((e, v), i) in synthesized.iter().zip(identity) {
        same_shape("auto_mask", shape, e.shape())?;
        same_shape("auto_mask", shape, v.shape())?;
        same_shape("auto_mask", shape, i.shape())?;
    }
    let data = (0..shape.len())
        .map(|p| {
            let best_syn = synthesized
                .iter()
                .filter(|(_, v)| v.data()[p] != 0.0)
                .map(|(e, _)| e.data()[p])
                .fold(f64::INFINITY, f64::min);
            let best_id = identity.iter().map(|e| e.data()[p]).fold(f64::INFINITY, f64::min);
            if best_syn < best_id {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Auto-mask of the reference image against its sources and their
/// syntheses. Pixels no synthesis covers validly are 0.
pub fn auto_mask(
    reference: &Tensor,
    sources: &[Tensor],
    synthesized: &[Synthesis],
    cfg: &LossConfig,
) -> Result<Tensor> {
    if sources.is_empty() || sources.len() != synthesized.len() {
        return Err(Error::InvalidArgument(format!(
            "auto_mask: {} sources, {} synthesized views",
            sources.len(),
            synthesized.len()
        )));
    }
    let all = Tensor::ones(reference.shape().with_channels(1));
    let mut syn = Vec::with_capacity(sources.len());
    let mut ident = Vec::with_capacity(sources.len());
    for (src, s) in sources.iter().zip(synthesized) {
        syn.push((photometric_error(reference, &s.image, &all, cfg)?, s.validity.clone()));
        ident.push(photometric_error(reference, src, &all, cfg)?);
    }
    auto_mask_from_errors(&syn, &ident)
}
