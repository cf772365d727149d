//! Pinhole projection, rigid transforms and depth-driven warp fields.
//!
//! Pixel `(u, v)` samples the continuous image coordinate `(u, v)` exactly;
//! there is no half-pixel offset anywhere in the crate.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Points at or behind this camera-space depth (meters) do not project.
pub const MIN_PROJECT_Z: f64 = 1e-6;

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Intrinsics { fx, fy, cx, cy }
    }

    /// Checks the intrinsics against an image of `width` x `height`.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < width as f64 && self.cy >= 0.0 && self.cy < height as f64) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {width}x{height} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// `K^-1 [u, v, 1]^T`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

/// Rigid transform `x -> R x + t` (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        Pose::new(Matrix3::from_row_slice(&r.rotation), Vector3::from(r.translation))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = p.rotation[(r, c)];
            }
        }
        PoseRepr { rotation, translation: p.translation.into() }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant 1 (tolerance 1e-6).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "not a rigid transform: |R^T R - I| = {ortho:e}, det R = {det}"
            )));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation given as an axis-angle vector (radians), then translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, t: Vector3<f64>) -> Self {
        Pose { rotation: Rotation3::from_scaled_axis(axis_angle).into_inner(), translation: t }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Transform from the camera frame of `from` into the camera frame of
    /// `to`, both given as camera-to-world poses.
    pub fn relative(from_c2w: &Pose, to_c2w: &Pose) -> Pose {
        to_c2w.inverse().compose(from_c2w)
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

pub fn invert_pose(p: &Pose) -> Pose {
    p.inverse()
}

/// `depth * K^-1 [u, v, 1]^T`.
pub fn backproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidArgument(format!("backproject needs depth > 0, got {depth}")));
    }
    Ok(k.ray(u, v) * depth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    /// False when `z <= MIN_PROJECT_Z`; `u`, `v` are then meaningless.
    pub valid: bool,
}

pub fn project(k: &Intrinsics, x: &Vector3<f64>) -> Projection {
    let z = x.z;
    if z <= MIN_PROJECT_Z {
        return Projection { u: f64::NAN, v: f64::NAN, z, valid: false };
    }
    Projection { u: k.fx * x.x / z + k.cx, v: k.fy * x.y / z + k.cy, z, valid: true }
}

/// Per-pixel sample coordinates into a source image plus their validity.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    /// `h x w x 2`, channel 0 = u', channel 1 = v' (source pixels).
    pub coords: Tensor,
    /// `h x w x 1`, 1 where the point projects in front of the source camera
    /// and inside `[0, w-1] x [0, h-1]`.
    pub validity: Tensor,
}

/// Graph nodes of a differentiable warp.
#[derive(Debug, Clone)]
pub struct WarpNodes {
    pub u: NodeId,
    pub v: NodeId,
    pub validity: Tensor,
}

/// Records the warp of every reference pixel into the source camera.
///
/// `depth` is an `h x w x 1` node. Coordinates are differentiable with respect
/// to it; validity is a constant computed from the forward values.
/// `src_size` is the `(height, width)` of the image that will be sampled.
pub fn warp_coords(
    g: &mut Graph,
    depth: NodeId,
    k: &Intrinsics,
    pose_r2s: &Pose,
    src_size: (usize, usize),
) -> Result<WarpNodes> {
    let shape = g.shape(depth);
    if shape.channels != 1 {
        return Err(Error::Shape(format!("warp: depth must be single-channel, got {shape}")));
    }
    let (h, w) = (shape.height, shape.width);
    let r = pose_r2s.rotation();
    let t = pose_r2s.translation();
    let mut dirs = [Tensor::zeros(shape), Tensor::zeros(shape), Tensor::zeros(shape)];
    for y in 0..h {
        for x in 0..w {
            let a = r * k.ray(x as f64, y as f64);
            for (axis, d) in dirs.iter_mut().enumerate() {
                d.set(y, x, 0, a[axis]);
            }
        }
    }
    let [ax, ay, az] = dirs;
    let mut axis = |dir: Tensor, offset: f64| -> Result<NodeId> {
        let c = g.constant(dir);
        let m = g.mul(depth, c)?;
        g.affine(m, 1.0, offset)
    };
    let xs = axis(ax, t.x)?;
    let ys = axis(ay, t.y)?;
    let zs = axis(az, t.z)?;
    let z_raw = g.value(zs).clone();
    let zs = g.clamp(zs, MIN_PROJECT_Z, f64::MAX)?;
    let xn = g.div(xs, zs)?;
    let yn = g.div(ys, zs)?;
    let u = g.affine(xn, k.fx, k.cx)?;
    let v = g.affine(yn, k.fy, k.cy)?;
    let (sh, sw) = src_size;
    let (uv, vv) = (g.value(u), g.value(v));
    let validity = Tensor::from_fn(shape, |y, x, _| {
        let i = y * w + x;
        let (pu, pv) = (uv.data()[i], vv.data()[i]);
        let ok = z_raw.data()[i] > MIN_PROJECT_Z
            && (0.0..=(sw - 1) as f64).contains(&pu)
            && (0.0..=(sh - 1) as f64).contains(&pv);
        if ok {
            1.0
        } else {
            0.0
        }
    });
    Ok(WarpNodes { u, v, validity })
}

/// Warp field of a reference depth map into a source camera of the same size.
pub fn warp_grid(depth: &Tensor, k: &Intrinsics, pose_r2s: &Pose) -> Result<WarpField> {
    if !depth.data().iter().all(|&d| d > 0.0) {
        return Err(Error::InvalidArgument("warp_grid: depth must be positive".into()));
    }
    let mut g = Graph::new();
    let d = g.constant(depth.clone());
    let nodes = warp_coords(&mut g, d, k, pose_r2s, (depth.height(), depth.width()))?;
    let (u, v) = (g.value(nodes.u), g.value(nodes.v));
    let coords = Tensor::from_fn(Shape::new(depth.height(), depth.width(), 2), |y, x, c| {
        if c == 0 {
            u.get(y, x, 0)
        } else {
            v.get(y, x, 0)
        }
    });
    Ok(WarpField { coords, validity: nodes.validity })
}
