use attnembed_core::data::{chronological_split, SeriesDataset, SplitSpec};
use attnembed_core::model::{Forecaster, ModelConfig};
use attnembed_core::theory::{separation_report, AnchorPolicy, ClusterSpec};
use attnembed_core::train::{predict_samples, SplitSamples};
use attnembed_core::Execution;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const ROUTES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn theory_trials(c: &mut Criterion) {
    let spec = ClusterSpec { d: 64, k: 25, ..ClusterSpec::default() };
    let mut group = c.benchmark_group("separation_report");
    group.sample_size(10);
    for (name, exec) in ROUTES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| separation_report(&spec, None, 30, AnchorPolicy::ExcludePair, exec).unwrap())
        });
    }
    group.finish();
}

fn batch_prediction(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let series = SeriesDataset::univariate("x", (0..800).map(|t| (0.2 * t as f64).sin()).collect()).unwrap();
    let segments = chronological_split(&series, &SplitSpec::default(), cfg.lookback).unwrap();
    let data = SplitSamples::new(&segments, cfg.lookback, cfg.horizon, 1).unwrap();
    let model = Forecaster::new(cfg).unwrap();
    let mut group = c.benchmark_group("predict_samples");
    group.sample_size(10);
    for (name, exec) in ROUTES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict_samples(&model, &data.train, 16, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, theory_trials, batch_prediction);
criterion_main!(benches);
