//! Rank-collapse measurement on encoder token matrices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EmbedMode;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Forecaster, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{train_model, SplitSamples, TrainConfig};

/// `||X - 1 xbar^T||_F / ||X||_F` for an `N x D` matrix, where `xbar` is the
/// column mean over rows. Zero for a zero matrix.
pub fn relative_residual_norm(x: &Tensor) -> Result<f64> {
    let &[n, d] = x.shape() else {
        return Err(Error::Dimension(format!("expected a matrix, got shape {:?}", x.shape())));
    };
    if n == 0 || d == 0 {
        return Err(Error::Dimension("empty token matrix".into()));
    }
    let data = x.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let (mut res, mut total) = (0.0, 0.0);
    for row in data.chunks(d) {
        for (v, m) in row.iter().zip(&mean) {
            res += (v - m) * (v - m);
            total += v * v;
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    // rounding can nudge the ratio a hair past 1 when xbar is tiny
    Ok((res / total).sqrt().min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub mode: EmbedMode,
    pub depth: usize,
    /// One value per encoder layer, in `[0, 1]`.
    pub values: Vec<f64>,
}

/// Per-layer residual norms of one token-matrix stack.
pub fn residual_profile(layers: &[Tensor]) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(Error::Argument("no layers recorded".into()));
    }
    layers.iter().map(relative_residual_norm).collect()
}

/// Layer-wise residual norms of `model`, averaged over the lookbacks in `batch`.
pub fn profile_model(model: &Forecaster, batch: &[Vec<f64>]) -> Result<RankProfile> {
    let out = model.predict(batch)?;
    let depth = model.config().encoder_layers;
    let mut values = vec![0.0; depth];
    for stack in &out.encoder_tokens {
        for (acc, v) in values.iter_mut().zip(residual_profile(stack)?) {
            *acc += v;
        }
    }
    values.iter_mut().for_each(|v| *v /= batch.len() as f64);
    Ok(RankProfile {
        mode: model.config().embed.mode,
        depth,
        values,
    })
}

/// Where the profiled weights come from.
#[derive(Debug, Clone, Copy)]
pub enum ModelSource<'a> {
    Untrained,
    /// Trained with early stopping; profiled at the best-validation weights.
    Trained {
        data: &'a SplitSamples,
        train: &'a TrainConfig,
    },
}

/// One profile per (mode, depth), modes in [`EmbedMode::ALL`] order. Every
/// model starts from `base.seed`.
pub fn rank_report(
    base: &ModelConfig,
    batch: &[Vec<f64>],
    depths: &[usize],
    source: ModelSource<'_>,
    exec: Execution,
) -> Result<Vec<RankProfile>> {
    if batch.is_empty() || depths.is_empty() {
        return Err(Error::Argument("rank report needs a batch and at least one depth".into()));
    }
    if depths.contains(&0) {
        return Err(Error::config("depths", "must be at least 1"));
    }
    let jobs: Vec<(EmbedMode, usize)> = EmbedMode::ALL
        .iter()
        .flat_map(|&m| depths.iter().map(move |&d| (m, d)))
        .collect();
    exec.try_map(jobs.len(), |i| {
        let (mode, depth) = jobs[i];
        let cfg = ModelConfig {
            encoder_layers: depth,
            ..base.with_mode(mode)
        };
        let mut model = Forecaster::new(cfg)?;
        if let ModelSource::Trained { data, train } = source {
            train_model(&mut model, &data.train, &data.val, train, Execution::Sequential)?;
        }
        profile_model(&model, batch)
    })
}

pub fn write_rank_csv(path: &Path, profiles: &[RankProfile]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(["mode", "depth", "layer_index", "relative_residual_norm"]).map_err(io)?;
    for p in profiles {
        for (l, v) in p.values.iter().enumerate() {
            w.write_record([p.mode.name().to_string(), p.depth.to_string(), l.to_string(), format!("{v:?}")])
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_and_zero_matrices_give_zero() {
        let x = Tensor::new(vec![3, 2], vec![1.0, -2.0, 1.0, -2.0, 1.0, -2.0]).unwrap();
        assert_eq!(relative_residual_norm(&x).unwrap(), 0.0);
        assert_eq!(relative_residual_norm(&Tensor::zeros(&[4, 3])).unwrap(), 0.0);
        assert!(relative_residual_norm(&Tensor::zeros(&[4])).is_err());
        assert!(residual_profile(&[]).is_err());
    }

    #[test]
    fn centered_matrix_gives_one() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -3.0, -1.0, 3.0]).unwrap();
        assert!((relative_residual_norm(&x).unwrap() - 1.0).abs() <= 1e-15);
    }
}
