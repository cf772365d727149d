//! Per-pixel depth grids and the optimization loops.
//!
//! Every frame of a dataset owns a grid of logits and takes a turn as the
//! reference, with all other frames as sources. This gives each frame the
//! depth the cross-view error needs for its own synthesis. Frame 0 is the one
//! reported by evaluation.
//!
//! The depth model is a free grid rather than a network on purpose: the loss
//! is what is under study, and a grid makes every pixel's behaviour
//! attributable to the objective alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId};
use crate::distill::{fuse_pseudo_depth, rkd_map_node, TeacherPair};
use crate::error::{Error, Result};
use crate::io;
use crate::photometric::{auto_mask_from_errors, LossConfig};
use crate::reflection::{
    adaptive_margin, cross_view_raw, identity_error, multi_source_combine_node, reflective_mask, triplet_map_node,
    ErrorPair, Margin, ReflectiveMask,
};
use crate::synthscene::Dataset;
use crate::tensor::{Shape, Tensor};
use crate::{DEPTH_MAX, DEPTH_MIN};

const DISP_MIN: f64 = 1.0 / DEPTH_MAX;
const DISP_SPAN: f64 = 1.0 / DEPTH_MIN - 1.0 / DEPTH_MAX;

/// Per-pixel logits decoded to depth through a sigmoid on disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthGridModel {
    pub logits: Tensor,
}

impl DepthGridModel {
    /// Uniform grid at the given depth.
    pub fn constant(shape: Shape, depth: f64) -> Result<Self> {
        Self::from_depth(&Tensor::full(shape, depth))
    }

    /// Inverts the decode; depths must lie strictly inside the model range.
    pub fn from_depth(depth: &Tensor) -> Result<Self> {
        if depth.channels() != 1 {
            return Err(Error::Shape(format!("depth grid must have 1 channel, got {}", depth.shape())));
        }
        if let Some(d) = depth.data().iter().find(|&&d| !(d > DEPTH_MIN && d < DEPTH_MAX)) {
            return Err(Error::InvalidArgument(format!("depth {d} outside ({DEPTH_MIN}, {DEPTH_MAX})")));
        }
        let logits = depth.map(|d| {
            let s = (1.0 / d - DISP_MIN) / DISP_SPAN;
            (s / (1.0 - s)).ln()
        });
        Ok(Self { logits })
    }

    pub fn shape(&self) -> Shape {
        self.logits.shape()
    }

    pub fn depth(&self) -> Tensor {
        decode_depth(&self.logits)
    }
}

pub fn decode_depth(logits: &Tensor) -> Tensor {
    logits.map(|l| 1.0 / (DISP_SPAN / (1.0 + (-l).exp()) + DISP_MIN))
}

/// Records `1 / (sigmoid(logits) * (1/d_min - 1/d_max) + 1/d_max)`.
pub fn decode_node(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let s = g.sigmoid(logits)?;
    let disp = g.affine(s, DISP_SPAN, DISP_MIN)?;
    let one = g.scalar(1.0);
    g.div(one, disp)
}

/// `exp(-mean_c |dI|)` along x and y: the edge-aware weights of the
/// smoothness term.
fn edge_weights(image: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let grad = |dy: usize, dx: usize| {
        Tensor::from_fn(Shape::new(h - dy, w - dx, 1), |y, x, _| {
            let m: f64 =
                (0..c).map(|k| (image.get(y + dy, x + dx, k) - image.get(y, x, k)).abs()).sum::<f64>() / c as f64;
            (-m).exp()
        })
    };
    (grad(0, 1), grad(1, 0))
}

/// Edge-aware smoothness of mean-normalized disparity:
/// `mean(|dx d*| e^-|dx I|) + mean(|dy d*| e^-|dy I|)` with `d* = disp / mean(disp)`.
pub fn smoothness_node(g: &mut Graph, depth: NodeId, image: &Tensor) -> Result<NodeId> {
    let shape = g.shape(depth);
    if image.shape().with_channels(1) != shape || shape.channels != 1 {
        return Err(Error::Shape(format!("smoothness: depth {shape} for image {}", image.shape())));
    }
    let (wx, wy) = edge_weights(image);
    let one = g.scalar(1.0);
    let disp = g.div(one, depth)?;
    let mean = g.mean(disp)?;
    let norm = g.div(disp, mean)?;
    let mut terms = Vec::with_capacity(2);
    for (d, w) in [(g.diff_x(norm)?, wx), (g.diff_y(norm)?, wy)] {
        let a = g.abs(d)?;
        let wn = g.constant(w);
        let weighted = g.mul(a, wn)?;
        terms.push(g.mean(weighted)?);
    }
    g.add(terms[0], terms[1])
}

pub fn smoothness_term(depth: &Tensor, image: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(depth.clone());
    let s = smoothness_node(&mut g, d, image)?;
    Ok(g.value(s).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Photometric error only: the triplet objective with `M_r = 0`.
    Photo,
    /// Reflection-aware triplet mining.
    Triplet,
    /// Log-depth regression onto fused teacher depth.
    Distill,
}

/// Which pixels take the hinge branch of the triplet loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Zero,
    One,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub smoothness_weight: f64,
    pub mode: LossMode,
    pub mask_mode: MaskMode,
    /// Fixed margin; `None` selects the adaptive quartile rule.
    pub fixed_delta: Option<f64>,
    /// Margin used when too few pixels are valid for the quartile rule.
    pub delta_fallback: f64,
    /// Reuse the reflective masks of this iteration from then on.
    pub freeze_mask_after: Option<usize>,
    /// Apply the auto-mask to the cross-view errors.
    pub auto_mask: bool,
    /// Starting depth of every grid, in meters.
    pub init_depth: f64,
    /// Standard deviation of seeded logit noise added at initialization.
    pub init_jitter: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            smoothness_weight: 1e-3,
            mode: LossMode::Photo,
            mask_mode: MaskMode::Auto,
            fixed_delta: None,
            delta_fallback: 0.0,
            freeze_mask_after: None,
            auto_mask: true,
            init_depth: 2.5,
            init_jitter: 0.0,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.smoothness_weight >= 0.0) {
            return bad(format!("smoothness_weight must be >= 0, got {}", self.smoothness_weight));
        }
        if let Some(d) = self.fixed_delta {
            if !(d >= 0.0) {
                return bad(format!("fixed delta must be >= 0, got {d}"));
            }
        }
        if !(self.delta_fallback >= 0.0) {
            return bad(format!("delta_fallback must be >= 0, got {}", self.delta_fallback));
        }
        if !(self.init_depth > DEPTH_MIN && self.init_depth < DEPTH_MAX) {
            return bad(format!("init_depth must lie in ({DEPTH_MIN}, {DEPTH_MAX}), got {}", self.init_depth));
        }
        if !(self.init_jitter >= 0.0) {
            return bad(format!("init_jitter must be >= 0, got {}", self.init_jitter));
        }
        self.loss.validate()
    }

    /// The mask mode actually applied: photo mode always uses `Zero`.
    pub fn effective_mask_mode(&self) -> MaskMode {
        match self.mode {
            LossMode::Photo => MaskMode::Zero,
            _ => self.mask_mode,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, shapes: &[Shape]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Mean margin over pairs; absent when no pair uses a margin.
    pub delta: Option<f64>,
    /// Fraction of valid pixels on the hinge branch, over all pairs.
    pub reflective_fraction: f64,
}

/// Ordered (reference, source) frame pairs: every frame against every other.
pub fn frame_pairs(n_frames: usize) -> Vec<(usize, usize)> {
    (0..n_frames).flat_map(|r| (0..n_frames).filter(move |&s| s != r).map(move |s| (r, s))).collect()
}

/// Per-pair quantities of one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct PairState {
    pub reference: usize,
    pub source: usize,
    pub errors: ErrorPair,
    /// The source warped into the reference view.
    pub synthesized: Tensor,
    pub margin: Margin,
    /// Mask applied to the hinge branch.
    pub mask: ReflectiveMask,
    /// Per-pixel triplet loss map.
    pub loss_map: Tensor,
}

struct PairNodes {
    reference: usize,
    source: usize,
    s2r: NodeId,
    errors: crate::reflection::ErrorPairNodes,
    margin: Margin,
    mask: ReflectiveMask,
    map: NodeId,
}

/// Multi-view photometric/triplet objective over a dataset.
pub struct Objective<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    pairs: Vec<(usize, usize)>,
    identity: Vec<Tensor>,
}

impl<'a> Objective<'a> {
    pub fn new(ds: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let shape = ds.shape();
        ds.intrinsics.validate(shape.width, shape.height)?;
        if ds.frames.len() < 2 {
            return Err(Error::InvalidArgument("training needs at least one source frame".into()));
        }
        let pairs = frame_pairs(ds.frames.len());
        let identity = pairs
            .iter()
            .map(|&(r, s)| identity_error(&ds.frames[r].image, &ds.frames[s].image, &cfg.loss))
            .collect::<Result<_>>()?;
        Ok(Self { ds, cfg, pairs, identity })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    fn pair_mask(&self, errors: &ErrorPair, frozen: Option<&ReflectiveMask>) -> Result<(Margin, ReflectiveMask)> {
        let margin = match self.cfg.fixed_delta {
            Some(delta) => Margin { delta, adaptive: false },
            None => adaptive_margin(errors, self.cfg.delta_fallback),
        };
        if let Some(m) = frozen {
            return Ok((Margin { delta: m.delta, adaptive: false }, m.clone()));
        }
        let mask = match self.cfg.effective_mask_mode() {
            MaskMode::Zero => ReflectiveMask { mask: Tensor::zeros(errors.validity.shape()), delta: margin.delta },
            MaskMode::One => ReflectiveMask { mask: errors.validity.clone(), delta: margin.delta },
            MaskMode::Auto => reflective_mask(errors, margin.delta)?,
        };
        Ok((margin, mask))
    }

    /// Records the full objective for the given depth nodes (one per frame).
    fn record(
        &self,
        g: &mut Graph,
        depths: &[NodeId],
        frozen: Option<&[ReflectiveMask]>,
    ) -> Result<(NodeId, Vec<PairNodes>)> {
        let k = &self.ds.intrinsics;
        let images: Vec<NodeId> = self.ds.frames.iter().map(|f| g.constant(f.image.clone())).collect();
        let mut per_ref: Vec<Vec<(PairNodes, crate::reflection::RawCrossView)>> =
            (0..self.ds.frames.len()).map(|_| Vec::new()).collect();
        for &(r, s) in &self.pairs {
            let pose = self.ds.relative_pose(r, s);
            let raw = cross_view_raw(g, images[r], images[s], depths[r], depths[s], k, &pose, &self.cfg.loss)?;
            per_ref[r].push((
                PairNodes {
                    reference: r,
                    source: s,
                    s2r: raw.s2r,
                    errors: crate::reflection::ErrorPairNodes {
                        e_pos: raw.e_pos,
                        e_neg: raw.e_neg,
                        validity: Tensor::zeros(Shape::SCALAR),
                    },
                    margin: Margin { delta: 0.0, adaptive: false },
                    mask: ReflectiveMask { mask: Tensor::zeros(Shape::SCALAR), delta: 0.0 },
                    map: raw.e_pos,
                },
                raw,
            ));
        }

        let mut out = Vec::with_capacity(self.pairs.len());
        let mut ref_losses = Vec::with_capacity(per_ref.len());
        let mut pair_index = 0;
        for (r, entries) in per_ref.into_iter().enumerate() {
            let principled = if self.cfg.auto_mask {
                let syn: Vec<(Tensor, Tensor)> =
                    entries.iter().map(|(_, raw)| (g.value(raw.e_pos).clone(), raw.valid_s2r.clone())).collect();
                let ids = &self.identity[pair_index..pair_index + entries.len()];
                auto_mask_from_errors(&syn, ids)?
            } else {
                Tensor::ones(self.ds.shape())
            };
            let mut maps = Vec::with_capacity(entries.len());
            for (mut nodes, raw) in entries {
                nodes.errors = raw.finish(g, &principled)?;
                let values = nodes.errors.values(g);
                let (margin, mask) = self.pair_mask(&values, frozen.map(|f| &f[pair_index]))?;
                nodes.map = triplet_map_node(g, &nodes.errors, &mask)?;
                nodes.margin = margin;
                nodes.mask = mask;
                maps.push((nodes.map, nodes.errors.validity.clone()));
                out.push(nodes);
                pair_index += 1;
            }
            let combined = multi_source_combine_node(g, &maps)?;
            let loss = if self.cfg.smoothness_weight > 0.0 {
                let smooth = smoothness_node(g, depths[r], &self.ds.frames[r].image)?;
                let weighted = g.scale(smooth, self.cfg.smoothness_weight)?;
                g.add(combined, weighted)?
            } else {
                combined
            };
            ref_losses.push(loss);
        }
        let mut total = ref_losses[0];
        for &l in &ref_losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, 1.0 / ref_losses.len() as f64)?;
        Ok((loss, out))
    }

    /// Records the scalar objective. With `frozen`, the given per-pair masks
    /// and margins replace the ones computed from the current errors.
    pub fn loss_node(&self, g: &mut Graph, depths: &[NodeId], frozen: Option<&[ReflectiveMask]>) -> Result<NodeId> {
        if depths.len() != self.ds.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{} depth nodes for {} frames",
                depths.len(),
                self.ds.frames.len()
            )));
        }
        if let Some(f) = frozen {
            if f.len() != self.pairs.len() {
                return Err(Error::InvalidArgument(format!("{} frozen masks for {} pairs", f.len(), self.pairs.len())));
            }
        }
        self.record(g, depths, frozen).map(|(loss, _)| loss)
    }

    /// Evaluates the objective at fixed depths, returning the scalar loss and
    /// the per-pair state.
    pub fn evaluate(&self, depths: &[Tensor]) -> Result<(f64, Vec<PairState>)> {
        self.check_depths(depths)?;
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = depths.iter().map(|d| g.constant(d.clone())).collect();
        let (loss, pairs) = self.record(&mut g, &nodes, None)?;
        let states = pairs
            .into_iter()
            .map(|p| PairState {
                reference: p.reference,
                source: p.source,
                errors: p.errors.values(&g),
                synthesized: g.value(p.s2r).clone(),
                margin: p.margin,
                loss_map: g.value(p.map).clone(),
                mask: p.mask,
            })
            .collect();
        Ok((g.value(loss).item(), states))
    }

    fn check_depths(&self, depths: &[Tensor]) -> Result<()> {
        if depths.len() != self.ds.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{} depth maps for {} frames",
                depths.len(),
                self.ds.frames.len()
            )));
        }
        let shape = self.ds.shape();
        if let Some(d) = depths.iter().find(|d| d.shape() != shape) {
            return Err(Error::Shape(format!("depth map {} for frames {shape}", d.shape())));
        }
        Ok(())
    }
}

/// Final grids of a training run and its log.
#[derive(Debug, Clone)]
pub struct Trained {
    pub models: Vec<DepthGridModel>,
    pub log: Vec<LogRecord>,
}

impl Trained {
    pub fn depths(&self) -> Vec<Tensor> {
        self.models.iter().map(|m| m.depth()).collect()
    }
}

fn initial_models(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<DepthGridModel>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..ds.frames.len())
        .map(|_| {
            let mut m = DepthGridModel::constant(ds.shape(), cfg.init_depth)?;
            if cfg.init_jitter > 0.0 {
                for l in m.logits.data_mut() {
                    let (u1, u2): (f64, f64) = (1.0 - rng.gen::<f64>(), rng.gen());
                    *l += cfg.init_jitter * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                }
            }
            Ok(m)
        })
        .collect()
}

/// Runs Adam over all frame grids; `observe` sees every log record as it is
/// produced.
fn optimize(
    mut models: Vec<DepthGridModel>,
    cfg: &TrainConfig,
    mut objective: impl FnMut(&mut Graph, &[NodeId], usize) -> Result<(NodeId, Option<f64>, f64)>,
    mut observe: impl FnMut(&LogRecord),
) -> Result<Trained> {
    let shapes: Vec<Shape> = models.iter().map(|m| m.shape()).collect();
    let mut adam = Adam::new(cfg, &shapes);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut g = Graph::new();
        let logits: Vec<NodeId> = models.iter().map(|m| g.parameter(m.logits.clone())).collect();
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { iteration, loss: f64::NAN },
            other => other,
        };
        let depths = logits.iter().map(|&l| decode_node(&mut g, l)).collect::<Result<Vec<_>>>().map_err(diverged)?;
        let (loss, delta, fraction) = objective(&mut g, &depths, iteration).map_err(diverged)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { iteration, loss: value });
        }
        let grads = g.backward(loss).map_err(diverged)?;
        let grad_refs: Vec<&Tensor> = logits.iter().map(|l| &grads[l]).collect();
        adam.step(models.iter_mut().map(|m| &mut m.logits).collect(), &grad_refs);
        let record = LogRecord { iteration, loss: value, delta, reflective_fraction: fraction };
        observe(&record);
        log.push(record);
    }
    Ok(Trained { models, log })
}

fn pair_summary<'p>(pairs: impl Iterator<Item = (&'p Margin, &'p ReflectiveMask, &'p Tensor)>) -> (Vec<f64>, f64) {
    let (mut deltas, mut flagged, mut valid) = (Vec::new(), 0usize, 0usize);
    for (margin, mask, validity) in pairs {
        deltas.push(margin.delta);
        flagged += mask.mask.count_nonzero();
        valid += validity.count_nonzero();
    }
    (deltas, if valid == 0 { 0.0 } else { flagged as f64 / valid as f64 })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains teacher grids in photo or triplet mode.
pub fn train(ds: &Dataset, cfg: &TrainConfig, observe: impl FnMut(&LogRecord)) -> Result<Trained> {
    if cfg.mode == LossMode::Distill {
        return Err(Error::InvalidArgument("distill mode needs teachers; use train_student".into()));
    }
    let objective = Objective::new(ds, cfg)?;
    let uses_margin = cfg.effective_mask_mode() != MaskMode::Zero;
    let mut frozen: Option<Vec<ReflectiveMask>> = None;
    let step = |g: &mut Graph, depths: &[NodeId], iteration: usize| {
        let (loss, pairs) = objective.record(g, depths, frozen.as_deref())?;
        if frozen.is_none() && cfg.freeze_mask_after.is_some_and(|n| iteration >= n) {
            frozen = Some(pairs.iter().map(|p| p.mask.clone()).collect());
        }
        let (deltas, fraction) = pair_summary(pairs.iter().map(|p| (&p.margin, &p.mask, &p.errors.validity)));
        Ok((loss, if uses_margin { mean(&deltas) } else { None }, fraction))
    };
    optimize(initial_models(ds, cfg)?, cfg, step, observe)
}

/// Fused target of one (reference, source) pair.
#[derive(Debug, Clone)]
pub struct PseudoDepth {
    pub reference: usize,
    pub source: usize,
    pub margin: Margin,
    pub mask: ReflectiveMask,
    pub validity: Tensor,
    pub depth: Tensor,
}

fn check_teacher(ds: &Dataset, name: &str, depths: &[Tensor]) -> Result<()> {
    let shape = ds.shape();
    if depths.len() != ds.frames.len() || depths.iter().any(|d| d.shape() != shape) {
        let got: Vec<String> = depths.iter().map(|d| d.shape().to_string()).collect();
        return Err(Error::Shape(format!(
            "{name}: expected {} depth maps of {shape}, got [{}]",
            ds.frames.len(),
            got.join(", ")
        )));
    }
    Ok(())
}

/// Per-pair pseudo depth: reflective masks come from the triplet teacher's
/// depths (`teacher_b`), then select it over the photometric teacher
/// (`teacher_a`) on flagged pixels.
pub fn pseudo_depths(
    ds: &Dataset,
    teacher_a: &[Tensor],
    teacher_b: &[Tensor],
    cfg: &TrainConfig,
) -> Result<Vec<PseudoDepth>> {
    check_teacher(ds, "teacher A", teacher_a)?;
    check_teacher(ds, "teacher B", teacher_b)?;
    let mask_cfg = TrainConfig { mode: LossMode::Triplet, ..cfg.clone() };
    let objective = Objective::new(ds, &mask_cfg)?;
    let (_, pairs) = objective.evaluate(teacher_b)?;
    pairs
        .into_iter()
        .map(|p| {
            let r = p.reference;
            let teachers = TeacherPair::new(teacher_b[r].clone(), teacher_a[r].clone(), p.mask.clone())?;
            Ok(PseudoDepth {
                reference: r,
                source: p.source,
                margin: p.margin,
                depth: fuse_pseudo_depth(&teachers),
                mask: p.mask,
                validity: p.errors.validity,
            })
        })
        .collect()
}

/// Trains student grids on `L_rkd` against the fused pseudo depths of
/// every pair.
pub fn train_student(
    ds: &Dataset,
    teacher_a: &[Tensor],
    teacher_b: &[Tensor],
    cfg: &TrainConfig,
    observe: impl FnMut(&LogRecord),
) -> Result<(Trained, Vec<PseudoDepth>)> {
    cfg.validate()?;
    let targets = pseudo_depths(ds, teacher_a, teacher_b, cfg)?;
    let (deltas, fraction) = pair_summary(targets.iter().map(|t| (&t.margin, &t.mask, &t.validity)));
    let delta = mean(&deltas);
    let step = |g: &mut Graph, depths: &[NodeId], _: usize| {
        let mut terms = Vec::with_capacity(targets.len());
        for t in &targets {
            let map = rkd_map_node(g, depths[t.reference], &t.depth)?;
            terms.push(g.mean(map)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok((g.scale(total, 1.0 / terms.len() as f64)?, delta, fraction))
    };
    let trained = optimize(initial_models(ds, cfg)?, cfg, step, observe)?;
    Ok((trained, targets))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub width: usize,
    pub height: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Per-frame logit grids (PFM).
    pub logits: Vec<String>,
    /// Per-frame decoded depths (PFM).
    pub depths: Vec<String>,
    /// How the grids were produced, when by training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

/// Per-frame depth grids as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub models: Vec<DepthGridModel>,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    /// Grids reproducing the given depths, e.g. ground truth.
    pub fn from_depths(depths: &[Tensor]) -> Result<Self> {
        let models = depths.iter().map(DepthGridModel::from_depth).collect::<Result<_>>()?;
        Ok(Self { models, config: None })
    }

    pub fn depths(&self) -> Vec<Tensor> {
        self.models.iter().map(|m| m.depth()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let first = self.models.first().ok_or_else(|| Error::InvalidArgument("empty checkpoint".into()))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shape = first.shape();
        let mut meta = CheckpointMeta {
            width: shape.width,
            height: shape.height,
            depth_min: DEPTH_MIN,
            depth_max: DEPTH_MAX,
            logits: Vec::new(),
            depths: Vec::new(),
            config: self.config.clone(),
        };
        for (i, m) in self.models.iter().enumerate() {
            let (l, d) = (format!("logits_{i:04}.pfm"), format!("depth_{i:04}.pfm"));
            io::write_pfm(&dir.join(&l), &m.logits)?;
            io::write_pfm(&dir.join(&d), &m.depth())?;
            meta.logits.push(l);
            meta.depths.push(d);
        }
        io::write_json(&dir.join(CHECKPOINT_FILE), &meta)
    }

    /// Loads the logit grids. [`Checkpoint::load_depths`] reads the stored
    /// depths instead, which avoids re-decoding `f32` logits.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = Self::meta(dir)?;
        let models = meta
            .logits
            .iter()
            .map(|l| Self::read_grid(dir, l, &meta).map(|logits| DepthGridModel { logits }))
            .collect::<Result<_>>()?;
        Ok(Self { models, config: meta.config })
    }

    pub fn load_depths(dir: &Path) -> Result<Vec<Tensor>> {
        let meta = Self::meta(dir)?;
        meta.depths.iter().map(|d| Self::read_grid(dir, d, &meta)).collect()
    }

    fn meta(dir: &Path) -> Result<CheckpointMeta> {
        let path = dir.join(CHECKPOINT_FILE);
        let meta: CheckpointMeta = io::read_json(&path)?;
        if meta.logits.is_empty() || meta.logits.len() != meta.depths.len() {
            return Err(Error::format(&path, "logit and depth lists must be nonempty and equally long"));
        }
        Ok(meta)
    }

    fn read_grid(dir: &Path, name: &str, meta: &CheckpointMeta) -> Result<Tensor> {
        let path = dir.join(name);
        let t = io::read_pfm(&path)?;
        if t.shape() != Shape::new(meta.height, meta.width, 1) {
            return Err(Error::format(
                &path,
                format!("expected {}x{}x1, found {}", meta.height, meta.width, t.shape()),
            ));
        }
        Ok(t)
    }
}
