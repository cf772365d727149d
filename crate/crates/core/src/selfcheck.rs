//! Gradient checks of the complete training objectives on small random
//! scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{finite_diff_check, GradCheckReport, Graph, NodeId, Op};
use crate::distill::rkd_map_node;
use crate::error::Result;
use crate::geometry::Intrinsics;
use crate::synthscene::{horizontal_trajectory, Dataset, SceneSpec};
use crate::tensor::Tensor;
use crate::trainer::{decode_node, DepthGridModel, LossMode, MaskMode, Objective, TrainConfig};

pub const CHECK_WIDTH: usize = 16;
pub const CHECK_HEIGHT: usize = 12;
pub const CHECK_STEP: f64 = 1e-5;
pub const CHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckedObjective {
    Photo,
    Triplet,
    Rkd,
}

impl CheckedObjective {
    pub const ALL: [CheckedObjective; 3] = [CheckedObjective::Photo, CheckedObjective::Triplet, CheckedObjective::Rkd];

    pub fn name(self) -> &'static str {
        match self {
            CheckedObjective::Photo => "photo",
            CheckedObjective::Triplet => "triplet",
            CheckedObjective::Rkd => "rkd",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ObjectiveCheck {
    pub seed: u64,
    pub objective: CheckedObjective,
    pub max_rel_error: f64,
    /// Frame index and flat pixel index of the worst coordinate.
    pub worst_frame: usize,
    pub worst_pixel: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub nudges: usize,
    pub passed: bool,
}

impl ObjectiveCheck {
    fn new(seed: u64, objective: CheckedObjective, r: GradCheckReport) -> Self {
        Self {
            seed,
            objective,
            max_rel_error: r.max_rel_error,
            worst_frame: r.worst.0,
            worst_pixel: r.worst.1,
            analytic: r.worst_analytic,
            numeric: r.worst_numeric,
            coordinates: r.coordinates,
            nudges: r.nudges,
            passed: r.passes(CHECK_TOLERANCE),
        }
    }
}

/// A two-frame 16x12 mirror scene with random geometry and texture.
pub fn random_scene(seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (CHECK_WIDTH as f64, CHECK_HEIGHT as f64);
    let u0 = rng.gen_range(2.0..6.0);
    let v0 = rng.gen_range(2.0..4.0);
    let spec = SceneSpec {
        height: CHECK_HEIGHT,
        width: CHECK_WIDTH,
        intrinsics: Intrinsics::new(16.0, 16.0, (w - 1.0) / 2.0, (h - 1.0) / 2.0),
        plane_depth: rng.gen_range(1.5..3.0),
        virtual_offset: rng.gen_range(0.5..1.5),
        mirror_rect: Some([u0, v0, u0 + rng.gen_range(4.0..8.0), v0 + rng.gen_range(3.0..6.0)]),
        texture_seed: rng.gen(),
        texture_smoothness: rng.gen_range(0.8..1.5),
        mirror_smoothness: None,
        trajectory: horizontal_trajectory(2, rng.gen_range(0.05..0.15)),
    };
    Dataset::from_spec(&spec, 2)
}

/// Logit grids near the ground truth with seeded perturbations.
fn random_logits(ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    ds.frames
        .iter()
        .map(|f| {
            let gt = f.gt_depth.as_ref().expect("generated frames carry ground truth");
            let mut m = DepthGridModel::from_depth(gt)?;
            for l in m.logits.data_mut() {
                *l += rng.gen_range(-0.3..0.3);
            }
            Ok(m.logits)
        })
        .collect()
}

/// A forward value that disagrees with its recorded operation: the analytic
/// gradient is twice the true one.
fn inject_bug(g: &mut Graph, loss: NodeId) -> Result<NodeId> {
    let value = g.value(loss).clone();
    g.record(Op::Affine { x: loss, scale: 2.0, offset: 0.0 }, value)
}

fn decode_all(g: &mut Graph, logits: &[NodeId]) -> Result<Vec<NodeId>> {
    logits.iter().map(|&l| decode_node(g, l)).collect()
}

/// Checks photo, triplet and rkd objectives for one seed. Reflective masks
/// and margins are computed at the starting point and held fixed, as they
/// are constants of the loss. `negative_control` corrupts every gradient
/// and must make all checks fail.
pub fn check_seed(seed: u64, negative_control: bool) -> Result<Vec<ObjectiveCheck>> {
    let ds = random_scene(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let start = random_logits(&ds, &mut rng)?;
    let finish = |g: &mut Graph, loss: NodeId| if negative_control { inject_bug(g, loss) } else { Ok(loss) };
    let mut out = Vec::with_capacity(3);
    for objective in CheckedObjective::ALL {
        let report = match objective {
            CheckedObjective::Photo | CheckedObjective::Triplet => {
                let mode = if objective == CheckedObjective::Photo { LossMode::Photo } else { LossMode::Triplet };
                let cfg = TrainConfig { mode, mask_mode: MaskMode::Auto, ..TrainConfig::default() };
                let obj = Objective::new(&ds, &cfg)?;
                let depths: Vec<Tensor> = start.iter().map(crate::trainer::decode_depth).collect();
                let (_, states) = obj.evaluate(&depths)?;
                let masks: Vec<_> = states.into_iter().map(|s| s.mask).collect();
                finite_diff_check(
                    |g, p| {
                        let d = decode_all(g, p)?;
                        let loss = obj.loss_node(g, &d, Some(&masks))?;
                        finish(g, loss)
                    },
                    &start,
                    CHECK_STEP,
                )?
            }
            CheckedObjective::Rkd => {
                let target: Vec<Tensor> =
                    ds.frames.iter().map(|_| Tensor::from_fn(ds.shape(), |_, _, _| rng.gen_range(0.5..6.0))).collect();
                finite_diff_check(
                    |g, p| {
                        let d = decode_all(g, p)?;
                        let mut total = None;
                        for (node, t) in d.iter().zip(&target) {
                            let map = rkd_map_node(g, *node, t)?;
                            let m = g.mean(map)?;
                            total = Some(match total {
                                None => m,
                                Some(acc) => g.add(acc, m)?,
                            });
                        }
                        let loss = g.scale(total.expect("two frames"), 0.5)?;
                        finish(g, loss)
                    },
                    &start,
                    CHECK_STEP,
                )?
            }
        };
        out.push(ObjectiveCheck::new(seed, objective, report));
    }
    Ok(out)
}
