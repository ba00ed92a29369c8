use attnembed_core::data::{chronological_split, SeriesDataset, SplitSpec};
use attnembed_core::diagnostics::{
    profile_model, rank_report, relative_residual_norm, residual_profile, write_rank_csv, ModelSource,
};
use attnembed_core::embed::EmbedMode;
use attnembed_core::model::{Forecaster, ModelConfig};
use attnembed_core::rng::seeded;
use attnembed_core::train::{SplitSamples, TrainConfig};
use attnembed_core::{Execution, Tensor};
use rand::Rng;

fn oracle(x: &[Vec<f64>]) -> f64 {
    let (n, d) = (x.len(), x[0].len());
    let mut res = 0.0;
    let mut total = 0.0;
    for j in 0..d {
        let mut mean = 0.0;
        for row in x {
            mean += row[j];
        }
        mean /= n as f64;
        for row in x {
            res += (row[j] - mean).powi(2);
            total += row[j].powi(2);
        }
    }
    (res / total).sqrt()
}

#[test]
fn residual_norm_matches_explicit_oracle() {
    let mut rng = seeded(3);
    for trial in 0..50 {
        let n = rng.gen_range(2..12);
        let d = rng.gen_range(1..20);
        let offset = if trial % 2 == 0 { 0.0 } else { rng.gen_range(-5.0..5.0) };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| offset + rng.gen_range(-1.0..1.0)).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let got = relative_residual_norm(&x).unwrap();
        assert!((got - oracle(&rows)).abs() <= 1e-12, "trial {trial}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn outer_product_has_zero_residual() {
    let x: Vec<f64> = vec![0.3, -1.2, 4.0, 2.5];
    let rows: Vec<Vec<f64>> = (0..5).map(|_| x.clone()).collect();
    let profile = residual_profile(&[Tensor::from_rows(&rows).unwrap()]).unwrap();
    assert!(profile[0].abs() <= 1e-15);
}

fn batch(count: usize, l: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|b| (0..l).map(|t| ((t + 7 * b) as f64 * 0.4).sin() + 0.01 * t as f64).collect())
        .collect()
}

#[test]
fn profile_agrees_with_token_matrices() {
    let model = Forecaster::new(ModelConfig { encoder_layers: 2, ..ModelConfig::tiny() }).unwrap();
    let lookbacks = batch(3, 24);
    let profile = profile_model(&model, &lookbacks).unwrap();
    let out = model.predict(&lookbacks).unwrap();
    for layer in 0..2 {
        let expected: f64 = out
            .encoder_tokens
            .iter()
            .map(|stack| {
                let t = &stack[layer];
                let rows: Vec<Vec<f64>> = t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect();
                oracle(&rows)
            })
            .sum::<f64>()
            / 3.0;
        assert!((profile.values[layer] - expected).abs() <= 1e-12);
    }
}

#[test]
fn untrained_report_covers_modes_and_depths() {
    let cfg = ModelConfig::tiny();
    let lookbacks = batch(4, 24);
    let a = rank_report(&cfg, &lookbacks, &[3, 6], ModelSource::Untrained, Execution::Parallel).unwrap();
    let b = rank_report(&cfg, &lookbacks, &[3, 6], ModelSource::Untrained, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    for (i, p) in a.iter().enumerate() {
        assert_eq!(p.mode, EmbedMode::ALL[i / 2]);
        assert_eq!(p.depth, [3, 6][i % 2]);
        assert_eq!(p.values.len(), p.depth);
        assert!(p.values.iter().all(|v| (0.0..=1.0).contains(v)), "{p:?}");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rank.csv");
    write_rank_csv(&path, &a).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "mode,depth,layer_index,relative_residual_norm");
    assert_eq!(text.lines().count(), 1 + 4 * (3 + 6));
    assert!(rank_report(&cfg, &lookbacks, &[0], ModelSource::Untrained, Execution::Parallel).is_err());
}

#[test]
fn trained_report_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let ds = SeriesDataset::univariate("x", (0..300).map(|t| (0.3 * t as f64).sin()).collect()).unwrap();
    let segs = chronological_split(&ds, &SplitSpec::default(), cfg.lookback).unwrap();
    let data = SplitSamples::new(&segs, cfg.lookback, cfg.horizon, 4).unwrap();
    let train = TrainConfig { max_epochs: 2, batch_size: 16, learning_rate: 1e-3, chunk_size: 8, ..TrainConfig::default() };
    let source = ModelSource::Trained { data: &data, train: &train };
    let lookbacks = batch(2, 24);
    let a = rank_report(&cfg, &lookbacks, &[1], source, Execution::Parallel).unwrap();
    let b = rank_report(&cfg, &lookbacks, &[1], source, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    let untrained = rank_report(&cfg, &lookbacks, &[1], ModelSource::Untrained, Execution::Parallel).unwrap();
    assert_ne!(a, untrained);
}
