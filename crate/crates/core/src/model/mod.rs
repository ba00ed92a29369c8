//! End-to-end forecaster: instance normalization, window embedding, a
//! pre-norm transformer encoder over window tokens, and a flatten-linear
//! head. Channels are processed independently with shared parameters.

mod checkpoint;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embed::{embed_lookbacks, init_embed_params, AttentionBundle, EmbedConfig, EmbedGeometry, EmbedMode, EmbedTrace};
use crate::error::{Error, Result};
use crate::layers::{self, BlockParts, Dropout};
use crate::preprocess::{denormalize, instance_normalize, InstanceStats, NORM_EPS};
use crate::rng::split;
use crate::tensor::{finite_difference_check, GradCheckReport, Graph, ParamStore, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub lookback: usize,
    pub horizon: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Learnable scalar affine map after instance normalization.
    pub revin_affine: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed: EmbedConfig::default(),
            lookback: 96,
            horizon: 96,
            encoder_layers: 3,
            encoder_heads: 8,
            ffn_dim: 256,
            dropout: 0.2,
            revin_affine: false,
            seed: 2024,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            embed: EmbedConfig {
                window_size: 6,
                stride: 6,
                landmark_kernel: 12,
                landmark_stride: 12,
                ema_alpha: 0.7,
                embed_layers: 1,
                embed_heads: 2,
                embed_dim: 8,
                out_dim: 16,
                ..EmbedConfig::default()
            },
            lookback: 24,
            horizon: 8,
            encoder_layers: 1,
            encoder_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            revin_affine: false,
            seed: 7,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.embed.out_dim
    }

    pub fn with_mode(&self, mode: EmbedMode) -> Self {
        let mut cfg = self.clone();
        cfg.embed.mode = mode;
        cfg
    }

    pub fn validate(&self) -> Result<EmbedGeometry> {
        if self.lookback == 0 {
            return Err(Error::config("lookback", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.lookback < self.embed.window_size {
            return Err(Error::config(
                "lookback",
                format!("{} is shorter than window_size {}", self.lookback, self.embed.window_size),
            ));
        }
        if self.encoder_layers == 0 {
            return Err(Error::config("encoder_layers", "must be at least 1"));
        }
        if self.encoder_heads == 0 || self.model_dim() % self.encoder_heads != 0 {
            return Err(Error::config(
                "encoder_heads",
                format!("{} does not divide model dim {}", self.encoder_heads, self.model_dim()),
            ));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("ffn_dim", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        self.embed.geometry(self.lookback)
    }
}

/// Fresh parameters. Each component draws from its own stream so that
/// models differing only in embedding mode share encoder and head weights.
pub fn init_params(cfg: &ModelConfig) -> Result<(ParamStore, EmbedGeometry)> {
    let geo = cfg.validate()?;
    let mut store = ParamStore::new();
    let dim = cfg.model_dim();
    if cfg.revin_affine {
        store.insert("norm.affine_weight", Tensor::scalar(1.0))?;
        store.insert("norm.affine_bias", Tensor::scalar(0.0))?;
    }
    init_embed_params(&cfg.embed, cfg.lookback, &mut store, &mut split(cfg.seed, 1))?;
    let mut rng = split(cfg.seed, 2);
    store.insert("encoder.position", layers::uniform(&mut rng, &[geo.n_windows, dim], 0.02))?;
    for l in 0..cfg.encoder_layers {
        layers::init_block(&mut store, &format!("encoder.layers.{l}"), dim, cfg.ffn_dim, BlockParts::Full, &mut rng)?;
    }
    layers::init_norm(&mut store, "encoder.final_norm", dim)?;
    layers::init_linear(&mut store, "head", geo.n_windows * dim, cfg.horizon, &mut split(cfg.seed, 3))?;
    Ok((store, geo))
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[samples, T]` in normalized units.
    pub prediction: Var,
    pub embed: EmbedTrace,
    /// Output of every encoder layer, `[samples * N, D]`.
    pub encoder_layers: Vec<Var>,
    /// Encoder attention probabilities per layer.
    pub encoder_probs: Vec<Var>,
    pub samples: usize,
}

/// Forward pass over `[samples, L]` normalized lookbacks.
pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    inputs: Var,
    mut dropout: Option<&mut Dropout>,
) -> Result<ForwardTrace> {
    let shape = g.shape(inputs).to_vec();
    if shape.len() != 2 || shape[1] != cfg.lookback {
        return Err(Error::Dimension(format!(
            "inputs {shape:?}, expected [samples, {}]",
            cfg.lookback
        )));
    }
    let samples = shape[0];
    let mut x = inputs;
    if cfg.revin_affine {
        let w = g.param("norm.affine_weight")?;
        let b = g.param("norm.affine_bias")?;
        x = g.mul_scalar(x, w)?;
        x = g.add_scalar(x, b)?;
    }
    let embed = embed_lookbacks(g, &cfg.embed, x)?;
    let n = embed.blocks / samples;
    let pos = g.param("encoder.position")?;
    let mut h = g.add_tiled(embed.embeddings, pos)?;
    h = layers::maybe_dropout(g, h, dropout.as_deref_mut())?;
    let mut encoder_layers = Vec::with_capacity(cfg.encoder_layers);
    let mut encoder_probs = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let out = layers::block_forward(
            g,
            h,
            &format!("encoder.layers.{l}"),
            samples,
            cfg.encoder_heads,
            None,
            BlockParts::Full,
            dropout.as_deref_mut(),
        )?;
        h = out.hidden;
        encoder_layers.push(h);
        encoder_probs.push(out.probs);
    }
    let h = layers::norm(g, h, "encoder.final_norm")?;
    let flat = g.reshape(h, vec![samples, n * cfg.model_dim()])?;
    let mut prediction = layers::linear(g, flat, "head")?;
    if cfg.revin_affine {
        let w = g.param("norm.affine_weight")?;
        let b = g.param("norm.affine_bias")?;
        let neg_b = g.scale(b, -1.0);
        prediction = g.add_scalar(prediction, neg_b)?;
        let inv_w = g.recip(w);
        prediction = g.mul_scalar(prediction, inv_w)?;
    }
    Ok(ForwardTrace {
        prediction,
        embed,
        encoder_layers,
        encoder_probs,
        samples,
    })
}

/// Prediction for every channel of one lookback.
#[derive(Debug, Clone)]
pub struct ForecastOutput {
    /// `T` denormalized values per channel.
    pub predictions: Vec<Vec<f64>>,
    pub stats: Vec<InstanceStats>,
    /// `[channel][layer]`, each `N x D`.
    pub encoder_tokens: Vec<Vec<Tensor>>,
    /// `[channel][window]`, softmax mode only, when requested.
    pub attention: Option<Vec<Vec<AttentionBundle>>>,
}

#[derive(Debug, Clone)]
pub struct Forecaster {
    config: ModelConfig,
    geometry: EmbedGeometry,
    params: ParamStore,
}

impl Forecaster {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (params, geometry) = init_params(&config)?;
        Ok(Forecaster {
            config,
            geometry,
            params,
        })
    }

    /// Wrap existing parameters after checking names and shapes against a
    /// fresh initialization of `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let (fresh, geometry) = init_params(&config)?;
        if fresh.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} parameters supplied, config needs {}",
                params.len(),
                fresh.len()
            )));
        }
        for p in fresh.iter() {
            let got = params
                .by_name(&p.name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{}`", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Forecaster {
            config,
            geometry,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> EmbedGeometry {
        self.geometry
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Normalized predictions (`[samples, T]`, row-major) for normalized
    /// inputs, without dropout.
    pub fn predict_normalized(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let l = self.config.lookback;
        if inputs.is_empty() || inputs.len() % l != 0 {
            return Err(Error::Dimension(format!(
                "{} input values are not a whole number of lookbacks of {l}",
                inputs.len()
            )));
        }
        let mut g = Graph::with_params(&self.params);
        let x = g.constant(Tensor::new(vec![inputs.len() / l, l], inputs.to_vec())?);
        let trace = forward(&mut g, &self.config, x, None)?;
        let out = g.value(trace.prediction).to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        Ok(out)
    }

    /// Forecast every channel of `lookback` (channel-major, each of length L).
    pub fn predict(&self, lookback: &[Vec<f64>]) -> Result<ForecastOutput> {
        self.predict_with(lookback, false)
    }

    pub fn predict_with(&self, lookback: &[Vec<f64>], retain_attention: bool) -> Result<ForecastOutput> {
        let l = self.config.lookback;
        if lookback.is_empty() {
            return Err(Error::Argument("no channels to forecast".into()));
        }
        let mut flat = Vec::with_capacity(lookback.len() * l);
        let mut stats = Vec::with_capacity(lookback.len());
        for (c, u) in lookback.iter().enumerate() {
            if u.len() != l {
                return Err(Error::Dimension(format!(
                    "channel {c} has {} values, lookback is {l}",
                    u.len()
                )));
            }
            let (z, s) = instance_normalize(u, NORM_EPS)?;
            flat.extend(z);
            stats.push(s);
        }
        let m = lookback.len();
        let mut g = Graph::with_params(&self.params);
        let x = g.constant(Tensor::new(vec![m, l], flat)?);
        let trace = forward(&mut g, &self.config, x, None)?;
        let t = self.config.horizon;
        let pred = g.value(trace.prediction);
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        let predictions = pred
            .chunks(t)
            .zip(&stats)
            .map(|(p, s)| denormalize(p, s))
            .collect();
        let n = self.geometry.n_windows;
        let d = self.config.model_dim();
        let encoder_tokens = (0..m)
            .map(|c| {
                trace
                    .encoder_layers
                    .iter()
                    .map(|&v| Tensor::new(vec![n, d], g.value(v)[c * n * d..(c + 1) * n * d].to_vec()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let attention = if retain_attention && self.config.embed.mode == EmbedMode::Softmax {
            let heads = self.config.embed.embed_heads;
            Some(
                (0..m)
                    .map(|c| (0..n).map(|w| trace.embed.bundle(&g, c * n + w, heads)).collect())
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(ForecastOutput {
            predictions,
            stats,
            encoder_tokens,
            attention,
        })
    }
}

/// Patch-mode embedding of one window: `window . W + b`.
pub fn patch_embed_baseline(window: &[f64], params: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::with_params(params);
    let x = g.constant(Tensor::new(vec![1, window.len()], window.to_vec())?);
    let y = layers::linear(&mut g, x, "embed.patch")?;
    Ok(g.value(y).to_vec())
}

/// Encoder outputs for one `N x D` embedding matrix.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Tensor,
    pub layers: Vec<Tensor>,
    /// Per layer `[heads * N, N]` attention probabilities.
    pub attention: Vec<Tensor>,
}

/// Positional embeddings plus the encoder stack (no final norm).
pub fn encoder_forward(embeddings: &Tensor, cfg: &ModelConfig, params: &ParamStore) -> Result<EncoderOutput> {
    let mut g = Graph::with_params(params);
    let x = g.constant(embeddings.clone());
    let pos = g.param("encoder.position")?;
    let mut h = g.add_tiled(x, pos)?;
    let mut layer_vars = Vec::new();
    let mut attention = Vec::new();
    for l in 0..cfg.encoder_layers {
        let out = layers::block_forward(
            &mut g,
            h,
            &format!("encoder.layers.{l}"),
            1,
            cfg.encoder_heads,
            None,
            BlockParts::Full,
            None,
        )?;
        h = out.hidden;
        layer_vars.push(h);
        attention.push(g.tensor(out.probs));
    }
    Ok(EncoderOutput {
        hidden: g.tensor(h),
        layers: layer_vars.iter().map(|&v| g.tensor(v)).collect(),
        attention,
    })
}

/// Flatten `N x D` hidden states and map them to `T` values.
pub fn forecast_head(hidden: &Tensor, params: &ParamStore) -> Result<Vec<f64>> {
    let w = params
        .by_name("head.weight")
        .ok_or_else(|| Error::Argument("unknown parameter `head.weight`".into()))?;
    if w.value.shape()[0] != hidden.numel() {
        return Err(Error::Dimension(format!(
            "head expects {} inputs, hidden states have {}",
            w.value.shape()[0],
            hidden.numel()
        )));
    }
    let mut g = Graph::with_params(params);
    let x = g.constant(Tensor::new(vec![1, hidden.numel()], hidden.data().to_vec())?);
    let y = layers::linear(&mut g, x, "head")?;
    Ok(g.value(y).to_vec())
}

/// Central-difference check of the mean squared forecast loss over a
/// random batch of `samples` lookbacks, at freshly initialized weights.
pub fn gradient_check(cfg: &ModelConfig, samples: usize, seed: u64, step: f64) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::Argument("gradient check needs at least one sample".into()));
    }
    let (store, _) = init_params(cfg)?;
    let mut r = split(seed, 0);
    let inputs: Vec<f64> = (0..samples * cfg.lookback).map(|_| r.gen_range(-1.0..1.0)).collect();
    let targets: Vec<f64> = (0..samples * cfg.horizon).map(|_| r.gen_range(-1.0..1.0)).collect();
    let loss = |g: &mut Graph| -> Result<Var> {
        let x = g.constant(Tensor::new(vec![samples, cfg.lookback], inputs.clone())?);
        let y = g.constant(Tensor::new(vec![samples, cfg.horizon], targets.clone())?);
        let trace = forward(g, cfg, x, None)?;
        let l = g.sq_err_sum(trace.prediction, y)?;
        Ok(g.scale(l, 1.0 / targets.len() as f64))
    };
    let mut g = Graph::with_params(&store);
    let l = loss(&mut g)?;
    let grads = g.backward(l)?.into_params();
    finite_difference_check(
        &store,
        &grads,
        |s| {
            let mut g = Graph::with_params(s);
            let l = loss(&mut g)?;
            Ok(g.scalar(l))
        },
        step,
    )
}
