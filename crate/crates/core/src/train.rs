//! Losses, Adam, the early-stopping training loop, evaluation and the
//! EMA/landmark ablation.
//!
//! A batch is cut into fixed chunks of samples; each chunk gets its own
//! graph and dropout stream, chunks run through [`Execution`], and their
//! gradients are merged in chunk order. Results therefore do not depend on
//! whether the parallel route is enabled.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{make_supervised_pairs, Segment};
use crate::embed::EmbedMode;
use crate::error::{Error, Result};
use crate::exec::{compensated_sum, Execution};
use crate::layers::Dropout;
use crate::model::{forward, Forecaster, ModelConfig};
use crate::preprocess::{denormalize, instance_normalize, normalize_with, InstanceStats, NORM_EPS};
use crate::rng::{child_seed, split};
use crate::tensor::{GradBuffer, Graph, ParamStore, Tensor};

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("no values to score".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let s = compensated_sum(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)));
    Ok(s / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let s = compensated_sum(pred.iter().zip(target).map(|(p, t)| (p - t).abs()));
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// MSE at each horizon step, averaged over samples.
    pub per_horizon_mse: Vec<f64>,
}

impl Metrics {
    /// Metrics over `samples` rows of `horizon` values each.
    pub fn compute(pred: &[f64], target: &[f64], horizon: usize) -> Result<Self> {
        let mse_all = mse(pred, target)?;
        let mae_all = mae(pred, target)?;
        if horizon == 0 || pred.len() % horizon != 0 {
            return Err(Error::Dimension(format!("{} values by horizon {horizon}", pred.len())));
        }
        let rows = pred.len() / horizon;
        let per_horizon_mse = (0..horizon)
            .map(|h| {
                compensated_sum((0..rows).map(|r| {
                    let i = r * horizon + h;
                    (pred[i] - target[i]) * (pred[i] - target[i])
                })) / rows as f64
            })
            .collect();
        Ok(Metrics {
            mse: mse_all,
            mae: mae_all,
            per_horizon_mse,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Samples per graph; the unit of parallel work.
    pub chunk_size: usize,
    /// Stride between consecutive training pairs.
    pub pair_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 100,
            patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 2024,
            chunk_size: 16,
            pair_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("chunk_size", self.chunk_size),
            ("pair_stride", self.pair_stride),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update of `x` in place; `t` starts at 1.
pub fn adam_update(x: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, h: AdamHyper) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..x.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        x[i] -= h.lr * mh / (vh.sqrt() + h.eps);
    }
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamHyper,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            hyper,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Parameters without a gradient (frozen, or unused) are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Dimension(format!(
                "{} gradient slots for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        for id in 0..store.len() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            adam_update(p.value.data_mut(), g, &mut self.m[id], &mut self.v[id], self.t, self.hyper);
        }
        Ok(())
    }
}

/// Normalized supervised examples for one segment, every channel stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub lookback: usize,
    pub horizon: usize,
    /// `[count, L]`, each row normalized with its own statistics.
    pub inputs: Vec<f64>,
    /// `[count, T]`, normalized with the matching input statistics.
    pub targets: Vec<f64>,
    pub raw_targets: Vec<f64>,
    pub stats: Vec<InstanceStats>,
    /// Source channel of each sample.
    pub channels: Vec<usize>,
}

impl Samples {
    pub fn from_segment(seg: &Segment, lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        let mut out = Samples {
            lookback,
            horizon,
            inputs: Vec::new(),
            targets: Vec::new(),
            raw_targets: Vec::new(),
            stats: Vec::new(),
            channels: Vec::new(),
        };
        for c in 0..seg.data.channels() {
            let pairs = make_supervised_pairs(&seg.data.column(c), lookback, horizon, stride)?;
            for p in pairs.pairs {
                let (z, stats) = instance_normalize(&p.input, NORM_EPS)?;
                out.inputs.extend(z);
                out.targets.extend(normalize_with(&p.target, &stats));
                out.raw_targets.extend(p.target);
                out.stats.push(stats);
                out.channels.push(c);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.lookback..(i + 1) * self.lookback]
    }

    fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }
}

fn check_shape(model: &Forecaster, s: &Samples) -> Result<()> {
    let c = model.config();
    if s.lookback != c.lookback || s.horizon != c.horizon {
        return Err(Error::Dimension(format!(
            "samples are {}->{}, model is {}->{}",
            s.lookback, s.horizon, c.lookback, c.horizon
        )));
    }
    Ok(())
}

/// Normalized predictions for every sample, `[count, T]`.
pub fn predict_samples(model: &Forecaster, s: &Samples, chunk: usize, exec: Execution) -> Result<Vec<f64>> {
    check_shape(model, s)?;
    let chunk = chunk.max(1);
    let n_chunks = s.len().div_ceil(chunk);
    let parts = exec.try_map(n_chunks, |k| {
        let lo = k * chunk;
        let hi = (lo + chunk).min(s.len());
        model.predict_normalized(&s.inputs[lo * s.lookback..hi * s.lookback])
    })?;
    Ok(parts.concat())
}

/// Loss and gradients of one chunk. The loss is scaled by `1 / (B * T)` so
/// chunk gradients sum to the batch-mean gradient.
fn chunk_gradients(
    store: &ParamStore,
    cfg: &ModelConfig,
    s: &Samples,
    idx: &[usize],
    batch_len: usize,
    dropout: Option<Dropout>,
) -> Result<(f64, GradBuffer)> {
    let mut x = Vec::with_capacity(idx.len() * s.lookback);
    let mut y = Vec::with_capacity(idx.len() * s.horizon);
    for &i in idx {
        x.extend_from_slice(s.input(i));
        y.extend_from_slice(s.target(i));
    }
    let mut g = Graph::with_params(store);
    let xv = g.constant(Tensor::new(vec![idx.len(), s.lookback], x)?);
    let yv = g.constant(Tensor::new(vec![idx.len(), s.horizon], y)?);
    let mut dropout = dropout;
    let trace = forward(&mut g, cfg, xv, dropout.as_mut())?;
    let sse = g.sq_err_sum(trace.prediction, yv)?;
    let sse_value = g.scalar(sse);
    if !sse_value.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let loss = g.scale(sse, 1.0 / (batch_len * s.horizon) as f64);
    let grads = g.backward(loss)?.into_params();
    Ok((sse_value, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

/// Minimize normalized MSE with Adam and early stopping on validation MSE.
/// On return the model holds the best-validation parameters.
pub fn train_model(
    model: &mut Forecaster,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_shape(model, train)?;
    check_shape(model, val)?;
    if train.is_empty() {
        return Err(Error::Argument("training split has no samples".into()));
    }
    if val.is_empty() {
        return Err(Error::Argument("validation split has no samples".into()));
    }
    let mcfg = model.config().clone();
    let mut adam = Adam::new(model.params(), AdamHyper::from(cfg));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut bad_epochs = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = child_seed(cfg.seed, epoch as u64);
        order.shuffle(&mut split(epoch_seed, 0));
        let mut sse_parts = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let chunks: Vec<&[usize]> = batch.chunks(cfg.chunk_size).collect();
            let store = model.params();
            let results = exec.map(chunks.len(), |k| {
                let dropout = (mcfg.dropout > 0.0).then(|| Dropout {
                    rate: mcfg.dropout,
                    rng: split(child_seed(epoch_seed, b as u64 + 1), k as u64),
                });
                chunk_gradients(store, &mcfg, train, chunks[k], batch.len(), dropout)
            });
            let mut total = GradBuffer::new(store.len());
            for r in results {
                let (sse, grads) = r.map_err(|e| match e {
                    Error::Numeric(why) => {
                        Error::Numeric(format!("{why} in epoch {epoch}, batch {b}"))
                    }
                    other => other,
                })?;
                sse_parts.push(sse);
                total.merge(&grads);
            }
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in epoch {epoch}, batch {b}"
                )));
            }
            adam.step(model.params_mut(), &total)?;
        }
        let train_mse = compensated_sum(sse_parts) / (train.len() * train.horizon) as f64;
        let val_pred = predict_samples(model, val, cfg.chunk_size, exec)?;
        let val_mse = mse(&val_pred, &val.targets)?;
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss in epoch {epoch}")));
        }
        log::info!("epoch {epoch}: train {train_mse:.6} val {val_mse:.6}");
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        let improved = best.as_ref().is_none_or(|(_, v, _)| val_mse < *v);
        if improved {
            best = Some((epoch, val_mse, model.params().clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_mse, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
        steps: adam.steps(),
    })
}

/// Test metrics in both spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Denormalized predictions against raw targets.
    pub raw: Metrics,
    /// Predictions and targets both in normalized units.
    pub normalized: Metrics,
    pub samples: usize,
}

/// Score `predictions` (`[count, T]`, normalized) for `s`.
pub fn score_predictions(s: &Samples, predictions: &[f64]) -> Result<Evaluation> {
    if s.is_empty() {
        return Err(Error::Argument("test split has no samples".into()));
    }
    let normalized = Metrics::compute(predictions, &s.targets, s.horizon)?;
    let raw_pred: Vec<f64> = predictions
        .chunks(s.horizon)
        .zip(&s.stats)
        .flat_map(|(p, st)| denormalize(p, st))
        .collect();
    let raw = Metrics::compute(&raw_pred, &s.raw_targets, s.horizon)?;
    Ok(Evaluation {
        raw,
        normalized,
        samples: s.len(),
    })
}

pub fn evaluate_model(model: &Forecaster, test: &Samples, chunk: usize, exec: Execution) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Argument("test split has no samples".into()));
    }
    let pred = predict_samples(model, test, chunk, exec)?;
    score_predictions(test, &pred)
}

/// Train, validate and test splits of one dataset.
#[derive(Debug, Clone)]
pub struct SplitSamples {
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
}

impl SplitSamples {
    pub fn new(
        segments: &(Segment, Segment, Segment),
        lookback: usize,
        horizon: usize,
        train_stride: usize,
    ) -> Result<Self> {
        Ok(SplitSamples {
            train: Samples::from_segment(&segments.0, lookback, horizon, train_stride)?,
            val: Samples::from_segment(&segments.1, lookback, horizon, 1)?,
            test: Samples::from_segment(&segments.2, lookback, horizon, 1)?,
        })
    }
}

/// Outcome of one seeded train-and-test run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub mode: EmbedMode,
    pub acat_width: usize,
    pub parameters: usize,
    pub report: TrainReport,
    pub test: Evaluation,
}

/// Build a model with `seed` for both initialization and training.
pub fn train_and_evaluate(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &SplitSamples,
    seed: u64,
    exec: Execution,
) -> Result<(Forecaster, RunResult)> {
    let mcfg = ModelConfig {
        seed,
        ..model_cfg.clone()
    };
    let tcfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let mut model = Forecaster::new(mcfg)?;
    let report = train_model(&mut model, &data.train, &data.val, &tcfg, exec)?;
    let test = evaluate_model(&model, &data.test, tcfg.chunk_size, exec)?;
    let result = RunResult {
        seed,
        mode: model.config().embed.mode,
        acat_width: model.geometry().acat_width,
        parameters: model.params().numel(),
        report,
        test,
    };
    Ok((model, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: String,
    pub acat_width: usize,
    pub runs: Vec<RunResult>,
    pub mean_mse: f64,
    pub mean_mae: f64,
    pub mean_normalized_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
}

pub const ABLATION_VARIANTS: [&str; 3] = ["full", "no_ema", "no_landmark"];

/// The three ablation configurations derived from `base`.
pub fn ablation_configs(base: &ModelConfig) -> Result<Vec<(&'static str, ModelConfig)>> {
    if !base.embed.use_ema || !base.embed.use_landmarks {
        return Err(Error::config(
            "embed.use_ema",
            "ablation needs a base config with EMA and landmarks enabled",
        ));
    }
    if base.embed.mode == EmbedMode::Patch {
        return Err(Error::config("embed.mode", "ablation needs an attention embedding mode"));
    }
    let mut no_ema = base.clone();
    no_ema.embed.use_ema = false;
    let mut no_landmark = base.clone();
    no_landmark.embed.use_landmarks = false;
    Ok(vec![
        (ABLATION_VARIANTS[0], base.clone()),
        (ABLATION_VARIANTS[1], no_ema),
        (ABLATION_VARIANTS[2], no_landmark),
    ])
}

pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &SplitSamples,
    seeds: &[u64],
    exec: Execution,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    let mut entries = Vec::with_capacity(3);
    for (name, cfg) in ablation_configs(base)? {
        let runs = seeds
            .iter()
            .map(|&s| train_and_evaluate(&cfg, train_cfg, data, s, exec).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()?;
        let k = runs.len() as f64;
        entries.push(AblationEntry {
            variant: name.to_string(),
            acat_width: cfg.validate()?.acat_width,
            mean_mse: runs.iter().map(|r| r.test.raw.mse).sum::<f64>() / k,
            mean_mae: runs.iter().map(|r| r.test.raw.mae).sum::<f64>() / k,
            mean_normalized_mse: runs.iter().map(|r| r.test.normalized.mse).sum::<f64>() / k,
            runs,
        });
    }
    Ok(AblationReport { entries })
}

/// `epoch,train_mse,val_mse` rows.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_mse,val_mse")?;
    for r in history {
        writeln!(f, "{},{:?},{:?}", r.epoch, r.train_mse, r.val_mse)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(mse(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(mae(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(mae(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(mse(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn first_adam_step_is_closed_form() {
        let h = AdamHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut x = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut x, &[1.0], &mut m, &mut v, 1, h);
        assert!((x[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut y = [0.5];
        adam_update(&mut y, &[0.0], &mut m, &mut v, 2, h);
        assert_eq!(y[0], 0.5 - 0.1 * (m[0] / (1.0 - 0.81)) / ((v[0] / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8));
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_parameters() {
        let h = AdamHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut x = [1.25, -3.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=5 {
            adam_update(&mut x, &[0.0, 0.0], &mut m, &mut v, t, h);
        }
        assert_eq!(x, [1.25, -3.0]);
    }

    #[test]
    fn adam_shrinks_a_quadratic_monotonically() {
        let h = AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut x = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let mut prev = x[0].abs();
        for t in 1..=100 {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut m, &mut v, t, h);
            assert!(x[0].abs() < prev, "step {t}");
            prev = x[0].abs();
        }
    }
}
