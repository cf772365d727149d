use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reflectdepth::diffcore::Graph;
use reflectdepth::metrics::depth_metrics;
use reflectdepth::photometric::{ssim, LossConfig};
use reflectdepth::reflection::quantile_select;
use reflectdepth::synthscene::{render_frame, Preset};
use reflectdepth::trainer::{train, LossMode, Objective};
use reflectdepth::Tensor;
use reflectdepth_bench::{config, dataset, flat_depths};

fn bench_kernels(c: &mut Criterion) {
    let ds = dataset(Preset::MirrorStandard);
    let (a, b) = (&ds.frames[0].image, &ds.frames[1].image);
    let cfg = LossConfig::default();
    c.bench_function("ssim 128x96", |bench| bench.iter(|| ssim(black_box(a), black_box(b), &cfg).unwrap()));

    c.bench_function("box3 forward+backward 128x96x3", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.parameter(a.clone());
            let y = g.box3(x).unwrap();
            let loss = g.mean(y).unwrap();
            g.backward(loss).unwrap()
        })
    });

    let values: Vec<f64> = a.data().to_vec();
    c.bench_function("quartile of 36k values", |bench| {
        bench.iter(|| {
            let mut v = values.clone();
            quantile_select(black_box(&mut v), 0.75)
        })
    });

    let gt = ds.frames[0].gt_depth.clone().unwrap();
    let pred = gt.map(|d| d * 1.1);
    let valid = Tensor::ones(gt.shape());
    c.bench_function("depth metrics 128x96", |bench| {
        bench.iter(|| depth_metrics(black_box(&pred), &gt, &valid, 0.1, 10.0).unwrap())
    });
}

fn bench_scene(c: &mut Criterion) {
    let mut group = c.benchmark_group("render frame");
    for preset in [Preset::MirrorSmall, Preset::MirrorStandard] {
        let spec = preset.spec();
        group.bench_with_input(BenchmarkId::from_parameter(preset.name()), &spec, |bench, spec| {
            bench.iter(|| render_frame(spec, &spec.trajectory[1]).unwrap())
        });
    }
    group.finish();
}

fn bench_objective(c: &mut Criterion) {
    let mut group = c.benchmark_group("objective");
    group.sample_size(10);
    for preset in [Preset::MirrorSmall, Preset::MirrorStandard] {
        let ds = dataset(preset);
        let depths = flat_depths(&ds, 2.5);
        for mode in [LossMode::Photo, LossMode::Triplet] {
            let cfg = config(mode, 1);
            let objective = Objective::new(&ds, &cfg).unwrap();
            let id = format!("{} {:?}", preset.name(), mode).to_lowercase();
            group.bench_function(BenchmarkId::new("evaluate", &id), |bench| {
                bench.iter(|| objective.evaluate(black_box(&depths)).unwrap())
            });
            group.bench_function(BenchmarkId::new("train 5 iterations", &id), |bench| {
                let cfg = config(mode, 5);
                bench.iter(|| train(&ds, &cfg, |_| {}).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_kernels, bench_scene, bench_objective);
criterion_main!(benches);
