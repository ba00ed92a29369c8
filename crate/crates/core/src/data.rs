//! Series ingestion, synthetic generators, chronological splits and
//! lookback/horizon pair construction.

use std::fs::File;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A timestamped multichannel series stored row-major (`rows x channels`).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    timestamps: Option<Vec<String>>,
    values: Vec<f64>,
    channel_names: Vec<String>,
}

impl SeriesDataset {
    pub fn new(
        timestamps: Option<Vec<String>>,
        values: Vec<f64>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let m = channel_names.len();
        if m == 0 {
            return Err(Error::Argument("dataset needs at least one channel".into()));
        }
        if values.is_empty() || values.len() % m != 0 {
            return Err(Error::Argument(format!(
                "{} values do not form rows of {m} channels",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at row {}", i / m)));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.len() / m {
                return Err(Error::Argument("timestamp count differs from row count".into()));
            }
            check_increasing(ts)?;
        }
        Ok(Self {
            timestamps,
            values,
            channel_names,
        })
    }

    /// Single-channel dataset with integer step timestamps.
    pub fn univariate(name: &str, values: Vec<f64>) -> Result<Self> {
        let ts = (0..values.len()).map(|t| t.to_string()).collect();
        Self::new(Some(ts), values, vec![name.to_string()])
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.channel_names.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels() + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(channel)
            .step_by(self.channels())
            .copied()
            .collect()
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows() {
            return Err(Error::Argument(format!(
                "row range {start}..{end} outside 0..{}",
                self.rows()
            )));
        }
        let m = self.channels();
        Ok(Self {
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            values: self.values[start * m..end * m].to_vec(),
            channel_names: self.channel_names.clone(),
        })
    }
}

fn check_increasing(ts: &[String]) -> Result<()> {
    let numeric: Option<Vec<f64>> = ts.iter().map(|t| t.trim().parse::<f64>().ok()).collect();
    let ok = match numeric {
        Some(n) => n.windows(2).all(|w| w[0] < w[1]),
        None => ts.windows(2).all(|w| w[0] < w[1]),
    };
    if !ok {
        return Err(Error::Argument("timestamps must be strictly increasing".into()));
    }
    Ok(())
}

// ---- synthetic series ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    /// Noiseless sum of sinusoids and cubics.
    F1,
    /// `F1` plus Gaussian noise.
    F2,
}

/// One sinusoid-plus-cubic term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
    pub cubic: [f64; 4],
}

impl Component {
    pub fn eval(&self, x: f64) -> f64 {
        let [a, b, c, d] = self.cubic;
        self.amplitude * (self.omega * x + self.phase).sin() + ((a * x + b) * x + c) * x + d
    }
}

/// Noise level for [`SeriesKind::F2`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    /// Multiple of the noiseless series' standard deviation.
    RelativeToSignal(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub n_components: usize,
    pub n_steps: usize,
    /// Sampling interval; step `t` is evaluated at `x = t * delta`.
    pub delta: f64,
    pub noise: NoiseLevel,
    pub seed: u64,
    /// Explicit terms; drawn from the default ranges when absent.
    pub components: Option<Vec<Component>>,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_components: 10,
            n_steps: 2000,
            delta: 0.05,
            noise: NoiseLevel::RelativeToSignal(0.3),
            seed: 0,
            components: None,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(Error::Argument("n_steps must be at least 1".into()));
        }
        if self.n_components < 1 && self.components.is_none() {
            return Err(Error::config("n_components", "must be at least 1"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config("delta", "must be positive"));
        }
        let sigma = match self.noise {
            NoiseLevel::RelativeToSignal(s) | NoiseLevel::Absolute(s) => s,
        };
        if !(sigma >= 0.0) {
            return Err(Error::config("noise", "must be nonnegative"));
        }
        Ok(())
    }

    /// The terms used for this seed.
    pub fn draw_components(&self) -> Vec<Component> {
        if let Some(c) = &self.components {
            return c.clone();
        }
        let mut r = rng::split(self.seed, 0);
        (0..self.n_components)
            .map(|_| Component {
                amplitude: r.gen_range(0.5..2.0),
                omega: r.gen_range(0.1..1.0),
                phase: r.gen_range(0.0..std::f64::consts::TAU),
                cubic: [
                    r.gen_range(-1e-9..1e-9),
                    r.gen_range(-1e-6..1e-6),
                    r.gen_range(-1e-3..1e-3),
                    r.gen_range(-1.0..1.0),
                ],
            })
            .collect()
    }
}

/// Sum-of-sinusoids-and-cubics series; deterministic given the params.
pub fn gen_synthetic(kind: SeriesKind, p: &SyntheticParams) -> Result<SeriesDataset> {
    p.validate()?;
    let components = p.draw_components();
    let clean: Vec<f64> = (0..p.n_steps)
        .map(|t| {
            let x = t as f64 * p.delta;
            components.iter().map(|c| c.eval(x)).sum()
        })
        .collect();
    let values = match kind {
        SeriesKind::F1 => clean,
        SeriesKind::F2 => {
            let sigma = match p.noise {
                NoiseLevel::Absolute(s) => s,
                NoiseLevel::RelativeToSignal(k) => k * population_std(&clean),
            };
            if sigma == 0.0 {
                clean
            } else {
                let normal = Normal::new(0.0, sigma)
                    .map_err(|e| Error::Argument(format!("noise: {e}")))?;
                let mut r = rng::split(p.seed, 1);
                clean.iter().map(|v| v + normal.sample(&mut r)).collect()
            }
        }
    };
    let name = match kind {
        SeriesKind::F1 => "f1",
        SeriesKind::F2 => "f2",
    };
    SeriesDataset::univariate(name, values)
}

pub(crate) fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

// ---- CSV -----------------------------------------------------------------------

/// Read a CSV whose first column is a timestamp and the rest are numeric
/// channels. Errors name the 1-based file line.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let file = File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .clone();
    if headers.len() < 2 || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Parse {
            line: 1,
            reason: "header needs a timestamp column and at least one channel".into(),
        });
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        timestamps.push(record[0].trim().to_string());
        for (j, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                reason: format!("non-numeric value `{cell}` in column `{}`", headers[j].trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    reason: format!("non-finite value in column `{}`", headers[j].trim()),
                });
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Parse {
            line: 2,
            reason: "no data rows".into(),
        });
    }
    SeriesDataset::new(Some(timestamps), values, channel_names)
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e
        .position()
        .map_or(fallback_line, |p| p.line() as usize);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            reason: format!("expected {expected_len} fields, found {len}"),
        },
        _ => Error::Parse {
            line,
            reason: e.to_string(),
        },
    }
}

pub fn write_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut header = vec!["timestamp".to_string()];
    header.extend(ds.channel_names.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for row in 0..ds.rows() {
        let ts = ds
            .timestamps
            .as_ref()
            .map_or_else(|| row.to_string(), |t| t[row].clone());
        let mut rec = vec![ts];
        // `{:?}` on f64 prints the shortest representation that round-trips
        rec.extend((0..ds.channels()).map(|c| format!("{:?}", ds.value(row, c))));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

// ---- splits --------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Segment fractions; must be positive and sum to one.
    Ratios { train: f64, val: f64, test: f64 },
    /// Cumulative fractions where validation and test begin.
    Borders { val_start: f64, test_start: f64 },
    /// Explicit row indices where validation and test begin.
    Rows { val_start: usize, test_start: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Prepend the last `L` rows of the preceding data to val/test as context.
    pub lookback_warmup: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::Ratios {
                train: 0.6,
                val: 0.2,
                test: 0.2,
            },
            lookback_warmup: true,
        }
    }
}

/// A contiguous chunk of a series. The first `context_rows` rows are
/// lookback context only and never serve as forecast targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub data: SeriesDataset,
    pub context_rows: usize,
    /// Index of the first non-context row in the source dataset.
    pub start_row: usize,
}

impl Segment {
    /// Rows that belong to this segment proper.
    pub fn own_rows(&self) -> usize {
        self.data.rows() - self.context_rows
    }
}

pub fn chronological_split(
    ds: &SeriesDataset,
    spec: &SplitSpec,
    lookback: usize,
) -> Result<(Segment, Segment, Segment)> {
    let n = ds.rows();
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    let (b1, b2) = match spec.mode {
        SplitMode::Ratios { train, val, test } => {
            if train <= 0.0 || val <= 0.0 || test <= 0.0 || ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    "split.ratios",
                    "ratios must be positive and sum to 1",
                ));
            }
            (floor(train * n as f64), floor((train + val) * n as f64))
        }
        SplitMode::Borders {
            val_start,
            test_start,
        } => {
            if !(0.0 < val_start && val_start < test_start && test_start < 1.0) {
                return Err(Error::config("split.borders", "need 0 < val < test < 1"));
            }
            (floor(val_start * n as f64), floor(test_start * n as f64))
        }
        SplitMode::Rows {
            val_start,
            test_start,
        } => (val_start, test_start),
    };
    if b1 == 0 || b2 <= b1 || b2 >= n {
        return Err(Error::Argument(format!(
            "split of {n} rows at {b1}/{b2} leaves an empty segment"
        )));
    }
    let segment = |start: usize, end: usize| -> Result<Segment> {
        let context = if spec.lookback_warmup && start > 0 {
            lookback.min(start)
        } else {
            0
        };
        Ok(Segment {
            data: ds.slice_rows(start - context, end)?,
            context_rows: context,
            start_row: start,
        })
    };
    Ok((segment(0, b1)?, segment(b1, b2)?, segment(b2, n)?))
}

// ---- supervised pairs ----------------------------------------------------------

/// One lookback/horizon example; indices are into the source series.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub input_start: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedPairs {
    pub pairs: Vec<Pair>,
    /// Set when the series is shorter than `lookback + horizon`.
    pub too_short: bool,
}

/// Number of windows of width `lookback + horizon` at the given stride.
pub fn pair_count(n: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if n < lookback + horizon || stride == 0 {
        return 0;
    }
    (n - lookback - horizon) / stride + 1
}

pub fn make_supervised_pairs(
    u: &[f64],
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<SupervisedPairs> {
    if lookback < 1 || horizon < 1 || stride < 1 {
        return Err(Error::Argument(
            "lookback, horizon and stride must be at least 1".into(),
        ));
    }
    let count = pair_count(u.len(), lookback, horizon, stride);
    let pairs = (0..count)
        .map(|i| {
            let s = i * stride;
            Pair {
                input_start: s,
                input: u[s..s + lookback].to_vec(),
                target: u[s + lookback..s + lookback + horizon].to_vec(),
            }
        })
        .collect();
    let too_short = u.len() < lookback + horizon;
    if too_short {
        log::warn!(
            "series of length {} is shorter than lookback {lookback} + horizon {horizon}",
            u.len()
        );
    }
    Ok(SupervisedPairs { pairs, too_short })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, channels: usize) -> SeriesDataset {
        let values = (0..rows * channels).map(|v| v as f64).collect();
        let names = (0..channels).map(|c| format!("c{c}")).collect();
        let ts = (0..rows).map(|t| t.to_string()).collect();
        SeriesDataset::new(Some(ts), values, names).unwrap()
    }

    #[test]
    fn default_generator_emits_2000_steps() {
        let ds = gen_synthetic(SeriesKind::F1, &SyntheticParams::default()).unwrap();
        assert_eq!(ds.rows(), 2000);
        assert_eq!(ds.channels(), 1);
    }

    #[test]
    fn zero_noise_f2_equals_f1() {
        let p = SyntheticParams {
            noise: NoiseLevel::Absolute(0.0),
            seed: 11,
            ..Default::default()
        };
        let f1 = gen_synthetic(SeriesKind::F1, &p).unwrap();
        let f2 = gen_synthetic(SeriesKind::F2, &p).unwrap();
        assert_eq!(f1.values(), f2.values());
    }

    #[test]
    fn noisy_series_is_bit_deterministic() {
        let p = SyntheticParams {
            seed: 5,
            ..Default::default()
        };
        let a = gen_synthetic(SeriesKind::F2, &p).unwrap();
        let b = gen_synthetic(SeriesKind::F2, &p).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let clean = gen_synthetic(SeriesKind::F1, &p).unwrap();
        assert_ne!(a.values(), clean.values());
    }

    #[test]
    fn single_sinusoid_closed_form() {
        let p = SyntheticParams {
            components: Some(vec![Component {
                amplitude: 1.0,
                omega: 1.0,
                phase: 0.0,
                cubic: [0.0; 4],
            }]),
            n_steps: 300,
            ..Default::default()
        };
        let ds = gen_synthetic(SeriesKind::F1, &p).unwrap();
        for (t, v) in ds.values().iter().enumerate() {
            assert!((v - (t as f64 * 0.05).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let p = SyntheticParams {
            n_steps: 0,
            ..Default::default()
        };
        assert!(matches!(
            gen_synthetic(SeriesKind::F1, &p),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ratio_split_sizes() {
        let ds = ramp(10, 1);
        let spec = SplitSpec {
            lookback_warmup: false,
            ..Default::default()
        };
        let (tr, va, te) = chronological_split(&ds, &spec, 3).unwrap();
        assert_eq!((tr.data.rows(), va.data.rows(), te.data.rows()), (6, 2, 2));
        assert_eq!((va.start_row, te.start_row), (6, 8));
    }

    #[test]
    fn warmup_prepends_context() {
        let ds = ramp(10, 1);
        let (_, va, te) = chronological_split(&ds, &SplitSpec::default(), 3).unwrap();
        // rows 4-6 (1-based) as context, then rows 7-8
        assert_eq!(va.context_rows, 3);
        assert_eq!(va.data.values(), &[3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(va.own_rows(), 2);
        assert_eq!(te.data.values(), &[5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn border_split_sizes() {
        let ds = ramp(200, 2);
        let spec = SplitSpec {
            mode: SplitMode::Borders {
                val_start: 0.7,
                test_start: 0.85,
            },
            lookback_warmup: false,
        };
        let (tr, va, te) = chronological_split(&ds, &spec, 3).unwrap();
        assert_eq!((tr.data.rows(), va.data.rows(), te.data.rows()), (140, 30, 30));
    }

    #[test]
    fn empty_segment_rejected() {
        let ds = ramp(3, 1);
        let spec = SplitSpec {
            mode: SplitMode::Rows {
                val_start: 2,
                test_start: 2,
            },
            lookback_warmup: false,
        };
        assert!(matches!(
            chronological_split(&ds, &spec, 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn pair_counts() {
        let u: Vec<f64> = (0..200).map(f64::from).collect();
        assert_eq!(make_supervised_pairs(&u, 96, 96, 1).unwrap().pairs.len(), 9);
        assert_eq!(make_supervised_pairs(&u, 96, 96, 2).unwrap().pairs.len(), 5);
        let short = make_supervised_pairs(&u[..100], 96, 96, 1).unwrap();
        assert!(short.pairs.is_empty() && short.too_short);
    }

    #[test]
    fn targets_follow_inputs() {
        let u: Vec<f64> = (0..50).map(f64::from).collect();
        for p in make_supervised_pairs(&u, 8, 4, 3).unwrap().pairs {
            assert_eq!(p.target[0], p.input[7] + 1.0);
            assert_eq!(p.input[0] as usize, p.input_start);
        }
    }

    #[test]
    fn timestamps_must_increase() {
        let ts = vec!["2".to_string(), "1".to_string()];
        assert!(SeriesDataset::new(Some(ts), vec![0.0, 1.0], vec!["a".into()]).is_err());
    }
}
