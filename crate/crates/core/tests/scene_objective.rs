use proptest::prelude::*;
use reflectdepth::metrics::region_split;
use reflectdepth::report::{coverage_mask, evaluate};
use reflectdepth::synthscene::{Dataset, Preset, SceneSpec};
use reflectdepth::trainer::{LossMode, MaskMode, Objective, TrainConfig};
use reflectdepth::Tensor;

fn dataset(spec: &SceneSpec, frames: usize) -> Dataset {
    Dataset::from_spec(spec, frames).unwrap()
}

fn gt_depths(ds: &Dataset) -> Vec<Tensor> {
    ds.frames.iter().map(|f| f.gt_depth.clone().unwrap()).collect()
}

/// Ground truth with every mirror pixel pushed to the virtual depth.
fn black_hole_depths(ds: &Dataset, virtual_depth: f64) -> Vec<Tensor> {
    ds.frames
        .iter()
        .map(|f| {
            let gt = f.gt_depth.as_ref().unwrap();
            gt.zip_map(f.gt_reflective.as_ref().unwrap(), |d, m| if m != 0.0 { virtual_depth } else { d }).unwrap()
        })
        .collect()
}

fn photo_loss(ds: &Dataset, depths: &[Tensor]) -> f64 {
    let cfg = TrainConfig { mode: LossMode::Photo, smoothness_weight: 0.0, ..TrainConfig::default() };
    Objective::new(ds, &cfg).unwrap().evaluate(depths).unwrap().0
}

#[test]
fn virtual_depth_beats_true_depth_photometrically() {
    let spec = Preset::MirrorStandard.spec();
    let ds = dataset(&spec, Preset::MirrorStandard.frames());
    let truth = photo_loss(&ds, &gt_depths(&ds));
    let hole = photo_loss(&ds, &black_hole_depths(&ds, spec.virtual_depth()));
    assert!(hole < truth, "black hole {hole} vs truth {truth}");
}

#[test]
fn black_hole_predictor_region_split() {
    let spec = Preset::MirrorStandard.spec();
    let ds = dataset(&spec, 3);
    let pred = &black_hole_depths(&ds, spec.virtual_depth())[0];
    let f = &ds.frames[0];
    let valid = Tensor::ones(ds.shape());
    let split = region_split(pred, f.gt_depth.as_ref().unwrap(), &valid, f.gt_reflective.as_ref().unwrap()).unwrap();
    let refl = split.reflective.unwrap();
    assert!((refl.abs_rel - spec.virtual_offset / spec.plane_depth).abs() < 1e-6, "{refl:?}");
    assert_eq!(split.non_reflective.unwrap().abs_rel, 0.0);
}

#[test]
fn lambertian_scene_has_no_reflective_region() {
    let ds = dataset(&Preset::Lambertian.spec(), 3);
    let cfg = TrainConfig::default();
    let report = evaluate(&ds, &gt_depths(&ds), &cfg).unwrap();
    assert!(report.reflective.is_none());
    assert!(report.mirror_mean_depth.is_none());
    assert_eq!(report.global.abs_rel, 0.0);
}

#[test]
fn zero_mask_mode_matches_photo_mode() {
    let ds = dataset(&Preset::MirrorSmall.spec(), 2);
    let depths = black_hole_depths(&ds, 2.6);
    let photo = TrainConfig { mode: LossMode::Photo, ..TrainConfig::default() };
    let zero = TrainConfig { mode: LossMode::Triplet, mask_mode: MaskMode::Zero, ..TrainConfig::default() };
    let (a, pa) = Objective::new(&ds, &photo).unwrap().evaluate(&depths).unwrap();
    let (b, pb) = Objective::new(&ds, &zero).unwrap().evaluate(&depths).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(x.loss_map, y.loss_map);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ground_truth_depth_scores_zero_error(seed in any::<u64>(), offset in 0.2f64..1.5) {
        let spec = SceneSpec { texture_seed: seed, virtual_offset: offset, ..Preset::MirrorSmall.spec() };
        let ds = dataset(&spec, 2);
        let report = evaluate(&ds, &gt_depths(&ds), &TrainConfig::default()).unwrap();
        prop_assert_eq!(report.global.abs_rel, 0.0);
        prop_assert_eq!(report.covered_pixels, coverage_mask(&ds, 0).unwrap().count_nonzero());
        let mirror = report.mirror_mean_depth.unwrap();
        prop_assert!((mirror - spec.plane_depth).abs() < 1e-6);
    }
}
