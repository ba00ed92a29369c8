//! Instance normalization, channel independence and window tokenization.

use serde::{Deserialize, Serialize};

use crate::data::SeriesDataset;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Statistics of one normalized instance, kept for the inverse map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub mean: f64,
    /// Population standard deviation, floored at `eps`.
    pub std: f64,
}

/// `(x - mean) / max(std, eps)` with population std.
pub fn instance_normalize(x: &[f64], eps: f64) -> Result<(Vec<f64>, InstanceStats)> {
    if !(eps > 0.0) {
        return Err(Error::Argument("normalization eps must be positive".into()));
    }
    if x.is_empty() {
        return Err(Error::Argument("cannot normalize an empty series".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(eps);
    let stats = InstanceStats { mean, std };
    Ok((normalize_with(x, &stats), stats))
}

/// Apply existing statistics (e.g. a lookback's stats to its target).
pub fn normalize_with(x: &[f64], stats: &InstanceStats) -> Vec<f64> {
    x.iter().map(|v| (v - stats.mean) / stats.std).collect()
}

pub fn denormalize(y: &[f64], stats: &InstanceStats) -> Vec<f64> {
    y.iter().map(|v| v * stats.std + stats.mean).collect()
}

/// One series per channel, in column order.
pub fn channel_split(ds: &SeriesDataset) -> Vec<Vec<f64>> {
    (0..ds.channels()).map(|c| ds.column(c)).collect()
}

/// Inverse of [`channel_split`]: interleave equal-length columns row-major.
pub fn channel_merge(columns: &[Vec<f64>]) -> Result<Vec<f64>> {
    let rows = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::Dimension("channels differ in length".into()));
    }
    Ok((0..rows)
        .flat_map(|r| columns.iter().map(move |c| c[r]))
        .collect())
}

/// `floor((len - window) / stride) + 1`, or an error when the window does
/// not fit.
pub fn window_count(len: usize, window: usize, stride: usize) -> Result<usize> {
    if window < 1 || stride < 1 {
        return Err(Error::Argument("window size and stride must be at least 1".into()));
    }
    if window > len {
        return Err(Error::Argument(format!(
            "window size {window} exceeds series length {len}"
        )));
    }
    Ok((len - window) / stride + 1)
}

/// Tokens cut from one series: `n_windows` rows of `window_size` values.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub windows: Vec<f64>,
    pub window_size: usize,
    pub stride: usize,
    pub source_len: usize,
    pub n_windows: usize,
}

impl WindowBatch {
    pub fn window(&self, i: usize) -> &[f64] {
        &self.windows[i * self.window_size..(i + 1) * self.window_size]
    }
}

/// Window `i` covers `[i*S, i*S + W)`; trailing samples are dropped.
pub fn window_tokenize(u: &[f64], window: usize, stride: usize) -> Result<WindowBatch> {
    let n = window_count(u.len(), window, stride)?;
    let mut windows = Vec::with_capacity(n * window);
    for i in 0..n {
        windows.extend_from_slice(&u[i * stride..i * stride + window]);
    }
    Ok(WindowBatch {
        windows,
        window_size: window,
        stride,
        source_len: u.len(),
        n_windows: n,
    })
}
