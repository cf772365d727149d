//! Fixtures shared by the benchmarks.

use reflectdepth::synthscene::{Dataset, Preset};
use reflectdepth::trainer::{LossMode, TrainConfig};
use reflectdepth::Tensor;

pub fn dataset(preset: Preset) -> Dataset {
    Dataset::from_spec(&preset.spec(), preset.frames()).expect("presets are valid")
}

pub fn config(mode: LossMode, iterations: usize) -> TrainConfig {
    TrainConfig { mode, iterations, ..TrainConfig::default() }
}

/// One constant depth map per frame.
pub fn flat_depths(ds: &Dataset, depth: f64) -> Vec<Tensor> {
    vec![Tensor::full(ds.shape(), depth); ds.frames.len()]
}
