//! Synthetic plane-and-mirror scenes with known depth and mirror masks.
//!
//! The world is a fronto-parallel textured plane at depth `Zp` in the frame of
//! the reference camera (the world frame). A rectangle of that plane, given in
//! reference-pixel coordinates, is a mirror: pixels whose ray hits it show a
//! second texture lying on a virtual plane at `Zv = Zp + offset`. Reflected
//! content therefore moves between views with the disparity of `Zv`, while the
//! ground-truth depth stays `Zp`.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::io;
use crate::tensor::{Shape, Tensor};
use crate::{DEPTH_MAX, DEPTH_MIN};

/// Clearance kept between scene depths and the model depth range.
const DEPTH_CLEARANCE: f64 = 0.05;
const TEXTURE_LO: f64 = 0.05;
const TEXTURE_HI: f64 = 0.95;
const TEXTURE_TARGET_STD: f64 = 0.2;
const TEXTURE_MAX_GAIN: f64 = 8.0;
/// Texels added around the visible region of each texture.
const TEXTURE_BORDER: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub intrinsics: Intrinsics,
    pub plane_depth: f64,
    pub virtual_offset: f64,
    /// `[u0, v0, u1, v1]` in reference pixels, half-open; `None` for a purely
    /// Lambertian scene.
    pub mirror_rect: Option<[f64; 4]>,
    pub texture_seed: u64,
    pub texture_smoothness: f64,
    /// Blur of the reflected texture; defaults to `texture_smoothness`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_smoothness: Option<f64>,
    /// Camera-to-world poses; the first is normally the identity.
    pub trajectory: Vec<Pose>,
}

impl SceneSpec {
    pub fn virtual_depth(&self) -> f64 {
        self.plane_depth + self.virtual_offset
    }

    /// True when mirror pixels move exactly like the plane.
    pub fn no_violation(&self) -> bool {
        self.mirror_rect.is_none() || self.virtual_offset == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image size {}x{} is below 8x8", self.width, self.height));
        }
        self.intrinsics.validate(self.width, self.height)?;
        if !(self.virtual_offset >= 0.0) {
            return bad(format!("virtual_offset must be >= 0, got {}", self.virtual_offset));
        }
        let (lo, hi) = (DEPTH_MIN + DEPTH_CLEARANCE, DEPTH_MAX - self.virtual_offset - DEPTH_CLEARANCE);
        if !(self.plane_depth >= lo && self.plane_depth <= hi) {
            return bad(format!("plane_depth {} outside [{lo}, {hi}]", self.plane_depth));
        }
        if let Some([u0, v0, u1, v1]) = self.mirror_rect {
            let inside =
                0.0 <= u0 && u0 < u1 && u1 <= self.width as f64 && 0.0 <= v0 && v0 < v1 && v1 <= self.height as f64;
            if !inside {
                return bad(format!(
                    "mirror_rect [{u0}, {v0}, {u1}, {v1}] must be nonempty and inside the {}x{} image",
                    self.width, self.height
                ));
            }
        }
        for (name, v) in
            [("texture_smoothness", Some(self.texture_smoothness)), ("mirror_smoothness", self.mirror_smoothness)]
        {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be finite and >= 0, got {v}"));
                }
            }
        }
        if self.trajectory.is_empty() {
            return bad("trajectory is empty".into());
        }
        Ok(())
    }
}

/// Poses at x = 0, +b, -b, +2b, -2b, ... (camera-to-world).
pub fn horizontal_trajectory(n: usize, baseline: f64) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let step = i.div_ceil(2) as f64;
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            Pose::from_translation(Vector3::new(sign * step * baseline, 0.0, 0.0))
        })
        .collect()
}

/// Named scenes used by the command line and the acceptance suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 64x48, two frames.
    MirrorSmall,
    /// 128x96, three frames, `Zp = 2`, `offset = 1`.
    MirrorStandard,
    /// The standard scene without a mirror.
    Lambertian,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::MirrorSmall, Preset::MirrorStandard, Preset::Lambertian];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MirrorSmall => "mirror-small",
            Preset::MirrorStandard => "mirror-standard",
            Preset::Lambertian => "lambertian",
        }
    }

    pub fn frames(self) -> usize {
        match self {
            Preset::MirrorSmall => 2,
            Preset::MirrorStandard | Preset::Lambertian => 3,
        }
    }

    pub fn spec(self) -> SceneSpec {
        match self {
            Preset::MirrorSmall => SceneSpec {
                height: 48,
                width: 64,
                intrinsics: Intrinsics::new(50.0, 50.0, 31.5, 23.5),
                plane_depth: 2.0,
                virtual_offset: 1.0,
                mirror_rect: Some([16.0, 10.0, 48.0, 38.0]),
                texture_seed: 7,
                texture_smoothness: 1.5,
                mirror_smoothness: None,
                trajectory: horizontal_trajectory(2, 0.32),
            },
            Preset::MirrorStandard => SceneSpec {
                height: 96,
                width: 128,
                intrinsics: Intrinsics::new(100.0, 100.0, 63.5, 47.5),
                plane_depth: 2.0,
                virtual_offset: 1.0,
                mirror_rect: Some([32.0, 20.0, 96.0, 76.0]),
                texture_seed: 11,
                texture_smoothness: 2.0,
                mirror_smoothness: None,
                trajectory: horizontal_trajectory(3, 0.16),
            },
            Preset::Lambertian => SceneSpec { mirror_rect: None, ..Preset::MirrorStandard.spec() },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::InvalidArgument(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Periodic Gaussian kernel of length `n`, indexed by circular offset.
fn periodic_kernel(sigma: f64, n: usize) -> Vec<f64> {
    let mut k = vec![0.0; n];
    if sigma == 0.0 {
        k[0] = 1.0;
        return k;
    }
    let reach = (6.0 * sigma).ceil() as i64 + n as i64;
    for d in -reach..=reach {
        let w = (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        k[d.rem_euclid(n as i64) as usize] += w;
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

fn circular_blur(line: &[f64], kernel: &[f64], out: &mut [f64]) {
    let n = line.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = kernel.iter().enumerate().map(|(d, w)| w * line[(i + n - d) % n]).sum();
    }
}

/// Smoothed, tileable RGB noise in `[0.05, 0.95]`.
///
/// Uniform noise is blurred with a periodic Gaussian of standard deviation
/// `smoothness` pixels, then its contrast is restored by the expected loss of
/// standard deviation (capped), so moderately smooth textures stay strongly
/// textured while very large blurs converge to a constant.
pub fn make_texture(seed: u64, smoothness: f64, height: usize, width: usize) -> Result<Tensor> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!("texture size {width}x{height} is below 8x8")));
    }
    if !(smoothness >= 0.0 && smoothness.is_finite()) {
        return Err(Error::InvalidArgument(format!("texture smoothness must be finite and >= 0, got {smoothness}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(height, width, 3);
    let noise: Vec<f64> = (0..shape.len()).map(|_| rng.gen::<f64>()).collect();
    let (kx, ky) = (periodic_kernel(smoothness, width), periodic_kernel(smoothness, height));
    let energy = |k: &[f64]| k.iter().map(|w| w * w).sum::<f64>().sqrt();
    let blurred_std = (1.0 / 12f64).sqrt() * energy(&kx) * energy(&ky);
    let gain = (TEXTURE_TARGET_STD / blurred_std).clamp(1.0, TEXTURE_MAX_GAIN);

    let mut out = Tensor::zeros(shape);
    for c in 0..3 {
        let mut rows = vec![0.0; height * width];
        let mut line = vec![0.0; width];
        for y in 0..height {
            let src: Vec<f64> = (0..width).map(|x| noise[(y * width + x) * 3 + c]).collect();
            circular_blur(&src, &kx, &mut line);
            rows[y * width..(y + 1) * width].copy_from_slice(&line);
        }
        let mut col = vec![0.0; height];
        for x in 0..width {
            let src: Vec<f64> = (0..height).map(|y| rows[y * width + x]).collect();
            circular_blur(&src, &ky, &mut col);
            for (y, v) in col.iter().enumerate() {
                out.set(y, x, c, (0.5 + gain * (v - 0.5)).clamp(TEXTURE_LO, TEXTURE_HI));
            }
        }
    }
    Ok(out)
}

/// A texture pinned to a plane `Z = depth`, addressed in the pixel
/// coordinates the reference camera would assign to plane points.
#[derive(Debug, Clone)]
struct PlaneTexture {
    depth: f64,
    texels: Tensor,
    origin: (f64, f64),
}

impl PlaneTexture {
    fn sample(&self, tu: f64, tv: f64) -> [f64; 3] {
        let (h, w) = (self.texels.height() as i64, self.texels.width() as i64);
        let (x, y) = (tu - self.origin.0, tv - self.origin.1);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let at = |yy: i64, xx: i64, c: usize| self.texels.get(yy.rem_euclid(h) as usize, xx.rem_euclid(w) as usize, c);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut rgb = [0.0; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let top = (1.0 - fx) * at(y0, x0, c) + fx * at(y0, x0 + 1, c);
            let bottom = (1.0 - fx) * at(y0 + 1, x0, c) + fx * at(y0 + 1, x0 + 1, c);
            *out = (1.0 - fy) * top + fy * bottom;
        }
        rgb
    }
}

/// Where a camera ray meets a plane `Z = depth` in world coordinates.
struct Hit {
    /// Distance along the ray in units of camera-frame depth.
    depth: f64,
    /// Reference-pixel coordinates of the hit point on that plane.
    tex: (f64, f64),
}

fn intersect(spec: &SceneSpec, pose: &Pose, u: f64, v: f64, plane: f64) -> Result<Hit> {
    let k = &spec.intrinsics;
    let ray_c = k.ray(u, v);
    let dir = pose.rotation() * ray_c;
    let origin = pose.translation();
    let s = (plane - origin.z) / dir.z;
    if !(dir.z > 0.0 && s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidScene(format!("plane at depth {plane} not visible through pixel ({u}, {v})")));
    }
    let p = origin + dir * s;
    Ok(Hit { depth: s * ray_c.z, tex: (k.fx * p.x / plane + k.cx, k.fy * p.y / plane + k.cy) })
}

/// Slack absorbing round-off in the projection round trip, so that pixel
/// centers on a rectangle edge land on the inclusive side.
const RECT_SLACK: f64 = 1e-9;

fn in_rect(rect: &Option<[f64; 4]>, (tu, tv): (f64, f64)) -> bool {
    let (tu, tv) = (tu + RECT_SLACK, tv + RECT_SLACK);
    matches!(rect, Some([u0, v0, u1, v1]) if *u0 <= tu && tu < *u1 && *v0 <= tv && tv < *v1)
}

/// Builds a texture large enough to cover what every trajectory pose sees
/// of the plane at `depth`.
fn plane_texture(spec: &SceneSpec, depth: f64, seed: u64, smoothness: f64) -> Result<PlaneTexture> {
    let (w, h) = ((spec.width - 1) as f64, (spec.height - 1) as f64);
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for pose in &spec.trajectory {
        for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let (tu, tv) = intersect(spec, pose, u, v, depth)?.tex;
            lo = (lo.0.min(tu), lo.1.min(tv));
            hi = (hi.0.max(tu), hi.1.max(tv));
        }
    }
    let origin = ((lo.0 - TEXTURE_BORDER).floor(), (lo.1 - TEXTURE_BORDER).floor());
    let size = |a: f64, b: f64| ((b + TEXTURE_BORDER).ceil() - a + 1.0).max(8.0) as usize;
    let texels = make_texture(seed, smoothness, size(origin.1, hi.1), size(origin.0, hi.0))?;
    Ok(PlaneTexture { depth, texels, origin })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub image: Tensor,
    pub gt_depth: Tensor,
    pub gt_reflective: Tensor,
    pub pose: Pose,
}

/// Both textures of a scene, built once per scene.
pub struct Renderer {
    spec: SceneSpec,
    surface: PlaneTexture,
    mirror: PlaneTexture,
}

impl Renderer {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let surface = plane_texture(spec, spec.plane_depth, spec.texture_seed, spec.texture_smoothness)?;
        let mirror = plane_texture(
            spec,
            spec.virtual_depth(),
            spec.texture_seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
            spec.mirror_smoothness.unwrap_or(spec.texture_smoothness),
        )?;
        Ok(Self { spec: spec.clone(), surface, mirror })
    }

    /// Which texture pixel `(u, v)` of a camera at `pose` shows, and where.
    fn lookup(&self, pose: &Pose, u: f64, v: f64) -> Result<(bool, (f64, f64), f64)> {
        let hit = intersect(&self.spec, pose, u, v, self.surface.depth)?;
        if in_rect(&self.spec.mirror_rect, hit.tex) {
            let virt = intersect(&self.spec, pose, u, v, self.mirror.depth)?;
            Ok((true, virt.tex, hit.depth))
        } else {
            Ok((false, hit.tex, hit.depth))
        }
    }

    /// Renders one view. Colors are rounded to 8-bit levels so the frame
    /// survives a PPM round trip unchanged.
    pub fn render(&self, pose: &Pose) -> Result<FrameSample> {
        let shape = Shape::new(self.spec.height, self.spec.width, 1);
        let mut image = Tensor::zeros(shape.with_channels(3));
        let mut gt_depth = Tensor::zeros(shape);
        let mut gt_reflective = Tensor::zeros(shape);
        for y in 0..shape.height {
            for x in 0..shape.width {
                let (mirror, tex, depth) = self.lookup(pose, x as f64, y as f64)?;
                let rgb = if mirror { self.mirror.sample(tex.0, tex.1) } else { self.surface.sample(tex.0, tex.1) };
                for (c, value) in rgb.into_iter().enumerate() {
                    image.set(y, x, c, value);
                }
                gt_depth.set(y, x, 0, depth);
                gt_reflective.set(y, x, 0, if mirror { 1.0 } else { 0.0 });
            }
        }
        if !(gt_depth.min_value() >= DEPTH_MIN && gt_depth.max_value() <= DEPTH_MAX) {
            return Err(Error::InvalidScene(format!(
                "rendered depth range [{}, {}] leaves [{DEPTH_MIN}, {DEPTH_MAX}]",
                gt_depth.min_value(),
                gt_depth.max_value()
            )));
        }
        Ok(FrameSample { image: io::quantize_u8(&image), gt_depth, gt_reflective, pose: *pose })
    }
}

pub fn render_frame(spec: &SceneSpec, pose: &Pose) -> Result<FrameSample> {
    Renderer::new(spec)?.render(pose)
}

/// Renders the first `n_frames` trajectory poses in parallel.
pub fn render_sequence(spec: &SceneSpec, n_frames: usize) -> Result<Vec<FrameSample>> {
    if n_frames < 2 || n_frames > spec.trajectory.len() {
        return Err(Error::InvalidArgument(format!(
            "n_frames must be in [2, {}] for this trajectory, got {n_frames}",
            spec.trajectory.len()
        )));
    }
    let renderer = Renderer::new(spec)?;
    spec.trajectory[..n_frames].par_iter().map(|p| renderer.render(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflective: Option<String>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    /// Set when the mirror cannot break photometric constancy.
    #[serde(default)]
    pub no_violation: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Renders the sequence and writes frames, depths, masks and the manifest
/// into `dir`, returning the manifest path.
pub fn generate_sequence(spec: &SceneSpec, n_frames: usize, dir: &Path) -> Result<PathBuf> {
    let frames = render_sequence(spec, n_frames)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let entry = FrameEntry {
            image: format!("frame_{i:04}.ppm"),
            depth: Some(format!("depth_{i:04}.pfm")),
            reflective: Some(format!("refl_{i:04}.pgm")),
            pose: f.pose,
        };
        io::write_ppm(&dir.join(&entry.image), &f.image)?;
        io::write_pfm(&dir.join(entry.depth.as_ref().expect("set above")), &f.gt_depth)?;
        io::write_pgm(&dir.join(entry.reflective.as_ref().expect("set above")), &f.gt_reflective)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        width: spec.width,
        height: spec.height,
        intrinsics: spec.intrinsics,
        frames: entries,
        scene: Some(spec.clone()),
        no_violation: spec.no_violation(),
    };
    let path = dir.join(MANIFEST_FILE);
    io::write_json(&path, &manifest)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Tensor,
    pub gt_depth: Option<Tensor>,
    pub gt_reflective: Option<Tensor>,
    /// Camera-to-world.
    pub pose: Pose,
}

/// A loaded multi-view sequence. Frame 0 is the evaluation reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub no_violation: bool,
}

impl Dataset {
    /// In-memory equivalent of generating and loading a dataset: depths are
    /// rounded to `f32` as PFM storage would.
    pub fn from_spec(spec: &SceneSpec, n_frames: usize) -> Result<Self> {
        let frames = render_sequence(spec, n_frames)?
            .into_iter()
            .map(|f| Frame {
                image: f.image,
                gt_depth: Some(f.gt_depth.map(|d| d as f32 as f64)),
                gt_reflective: Some(f.gt_reflective),
                pose: f.pose,
            })
            .collect();
        Ok(Self { intrinsics: spec.intrinsics, frames, no_violation: spec.no_violation() })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = io::read_json(&manifest_path)?;
        manifest.intrinsics.validate(manifest.width, manifest.height)?;
        if manifest.frames.len() < 2 {
            return Err(Error::format(&manifest_path, "a dataset needs at least two frames"));
        }
        let shape = Shape::new(manifest.height, manifest.width, 1);
        let check = |path: &Path, t: Tensor, channels: usize| -> Result<Tensor> {
            if t.shape() != shape.with_channels(channels) {
                return Err(Error::format(
                    path,
                    format!("expected {}, found {}", shape.with_channels(channels), t.shape()),
                ));
            }
            Ok(t)
        };
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for entry in &manifest.frames {
            let image_path = dir.join(&entry.image);
            let image = check(&image_path, io::read_ppm(&image_path)?, 3)?;
            let gt_depth = match &entry.depth {
                Some(p) => Some(check(&dir.join(p), io::read_pfm(&dir.join(p))?, 1)?),
                None => None,
            };
            let gt_reflective = match &entry.reflective {
                Some(p) => {
                    Some(check(&dir.join(p), io::read_pgm(&dir.join(p))?, 1)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
                }
                None => None,
            };
            frames.push(Frame { image, gt_depth, gt_reflective, pose: entry.pose });
        }
        Ok(Self { intrinsics: manifest.intrinsics, frames, no_violation: manifest.no_violation })
    }

    pub fn shape(&self) -> Shape {
        self.frames[0].image.shape().with_channels(1)
    }

    /// Relative pose mapping points of frame `from` into frame `to`.
    pub fn relative_pose(&self, from: usize, to: usize) -> Pose {
        Pose::relative(&self.frames[from].pose, &self.frames[to].pose)
    }
}
