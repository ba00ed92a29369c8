//! Attention-weight window embeddings.
//!
//! Each window of a normalized lookback is turned into `G + W` scalar
//! tokens: `G` global landmarks from a strided convolution over the whole
//! lookback, followed by the window's own values. In softmax mode a small
//! pre-norm attention stack runs over those tokens and the last row of
//! every head's attention matrix is harvested; in kernel modes the last
//! query is scored against every key with an RBF or polynomial kernel.
//! Either way the harvested vector `A^cat` is projected linearly to `D`.
//! Patch mode skips all of this and projects the raw window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, BlockParts, QkSmoothing};
use crate::preprocess::window_count;
use crate::rng::Rng;
use crate::tensor::{kernel_value, Graph, KernelKind, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Softmax,
    Rbf,
    Poly,
    Patch,
}

impl EmbedMode {
    pub const ALL: [EmbedMode; 4] = [
        EmbedMode::Patch,
        EmbedMode::Softmax,
        EmbedMode::Rbf,
        EmbedMode::Poly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::Softmax => "softmax",
            EmbedMode::Rbf => "rbf",
            EmbedMode::Poly => "poly",
            EmbedMode::Patch => "patch",
        }
    }

    pub fn is_kernel(self) -> bool {
        matches!(self, EmbedMode::Rbf | EmbedMode::Poly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub window_size: usize,
    pub stride: usize,
    pub landmark_kernel: usize,
    pub landmark_stride: usize,
    pub ema_alpha: f64,
    pub embed_layers: usize,
    pub embed_heads: usize,
    pub embed_dim: usize,
    pub out_dim: usize,
    pub mode: EmbedMode,
    /// `None` means `1 / d_head`.
    pub rbf_gamma: Option<f64>,
    pub poly_degree: u32,
    pub poly_coef: f64,
    pub use_ema: bool,
    pub use_landmarks: bool,
    pub ema_include_landmarks: bool,
    pub normalize_kernel_rows: bool,
    /// Number of linear maps in the kernel-mode query/key networks.
    pub kernel_mlp_depth: usize,
    /// Share one network between queries and keys (kernel modes).
    pub tie_qk: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            window_size: 10,
            stride: 5,
            landmark_kernel: 48,
            landmark_stride: 48,
            ema_alpha: 0.7,
            embed_layers: 3,
            embed_heads: 4,
            embed_dim: 16,
            out_dim: 128,
            mode: EmbedMode::Softmax,
            rbf_gamma: None,
            poly_degree: 2,
            poly_coef: 1.0,
            use_ema: true,
            use_landmarks: true,
            ema_include_landmarks: false,
            normalize_kernel_rows: false,
            kernel_mlp_depth: 1,
            tie_qk: false,
        }
    }
}

/// Sizes that follow from a config and a lookback length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedGeometry {
    pub lookback: usize,
    pub n_windows: usize,
    pub landmarks: usize,
    /// Tokens per window, `G + W` (just `W` in patch mode).
    pub tokens: usize,
    /// Width of the pre-projection vector.
    pub acat_width: usize,
}

impl EmbedConfig {
    pub fn d_head(&self) -> usize {
        self.embed_dim / self.embed_heads.max(1)
    }

    pub fn kernel(&self) -> Result<KernelKind> {
        let kind = match self.mode {
            EmbedMode::Rbf => KernelKind::Rbf {
                gamma: self.rbf_gamma.unwrap_or(1.0 / self.d_head() as f64),
            },
            EmbedMode::Poly => KernelKind::Poly {
                degree: self.poly_degree,
                coef: self.poly_coef,
            },
            m => {
                return Err(Error::config("mode", format!("{} is not a kernel mode", m.name())))
            }
        };
        validate_kernel(kind)?;
        Ok(kind)
    }

    /// Checks that do not depend on the lookback length.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_size", self.window_size),
            ("stride", self.stride),
            ("out_dim", self.out_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::config(
                "ema_alpha",
                format!("{} outside (0, 1]", self.ema_alpha),
            ));
        }
        if self.mode == EmbedMode::Patch {
            return Ok(());
        }
        if self.use_landmarks && (self.landmark_kernel == 0 || self.landmark_stride == 0) {
            return Err(Error::config(
                "landmark_kernel",
                "landmark kernel and stride must be at least 1",
            ));
        }
        if self.embed_heads == 0 {
            return Err(Error::config("embed_heads", "must be at least 1"));
        }
        if self.embed_dim == 0 || self.embed_dim % self.embed_heads != 0 {
            return Err(Error::config(
                "embed_dim",
                format!("{} is not a positive multiple of {} heads", self.embed_dim, self.embed_heads),
            ));
        }
        match self.mode {
            EmbedMode::Softmax if self.embed_layers == 0 => {
                Err(Error::config("embed_layers", "must be at least 1"))
            }
            EmbedMode::Rbf | EmbedMode::Poly => {
                if self.kernel_mlp_depth == 0 {
                    return Err(Error::config("kernel_mlp_depth", "must be at least 1"));
                }
                self.kernel().map(|_| ())
            }
            _ => Ok(()),
        }
    }

    pub fn landmark_count(&self, lookback: usize) -> Result<usize> {
        if self.mode == EmbedMode::Patch || !self.use_landmarks {
            return Ok(0);
        }
        if self.landmark_kernel > lookback {
            return Err(Error::config(
                "landmark_kernel",
                format!("{} exceeds lookback {lookback}", self.landmark_kernel),
            ));
        }
        Ok((lookback - self.landmark_kernel) / self.landmark_stride + 1)
    }

    pub fn geometry(&self, lookback: usize) -> Result<EmbedGeometry> {
        self.validate()?;
        if self.window_size > lookback {
            return Err(Error::config(
                "window_size",
                format!("{} exceeds lookback {lookback}", self.window_size),
            ));
        }
        let n_windows = window_count(lookback, self.window_size, self.stride)?;
        let landmarks = self.landmark_count(lookback)?;
        let tokens = landmarks + self.window_size;
        let acat_width = match self.mode {
            EmbedMode::Softmax => self.embed_layers * self.embed_heads * tokens,
            EmbedMode::Rbf | EmbedMode::Poly => self.embed_heads * tokens,
            EmbedMode::Patch => self.window_size,
        };
        Ok(EmbedGeometry {
            lookback,
            n_windows,
            landmarks,
            tokens,
            acat_width,
        })
    }

    fn smoothing(&self, landmarks: usize) -> Option<QkSmoothing> {
        self.use_ema.then(|| QkSmoothing {
            start: if self.ema_include_landmarks { 0 } else { landmarks },
            alpha: self.ema_alpha,
        })
    }
}

fn validate_kernel(kind: KernelKind) -> Result<()> {
    match kind {
        KernelKind::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
            Err(Error::config("rbf_gamma", format!("{gamma} must be positive")))
        }
        KernelKind::Poly { degree, .. } if degree < 1 => {
            Err(Error::config("poly_degree", "must be at least 1"))
        }
        KernelKind::Poly { coef, .. } if !coef.is_finite() => {
            Err(Error::config("poly_coef", "must be finite"))
        }
        _ => Ok(()),
    }
}

/// `exp(-gamma |u-v|^2)` or `(u.v / sqrt(len) + coef)^degree`.
pub fn kernel_eval(kind: KernelKind, u: &[f64], v: &[f64]) -> Result<f64> {
    validate_kernel(kind)?;
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Dimension(format!(
            "kernel arguments of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(kernel_value(kind, u, v))
}

/// Insert every `embed.*` parameter for `cfg` at this lookback.
pub fn init_embed_params(
    cfg: &EmbedConfig,
    lookback: usize,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<EmbedGeometry> {
    let geo = cfg.geometry(lookback)?;
    let d = cfg.embed_dim;
    if cfg.mode == EmbedMode::Patch {
        layers::init_linear(store, "embed.patch", cfg.window_size, cfg.out_dim, rng)?;
        return Ok(geo);
    }
    if geo.landmarks > 0 {
        let k = cfg.landmark_kernel;
        store.insert("embed.landmark.weight", Tensor::filled(&[k], 1.0 / k as f64))?;
        store.insert("embed.landmark.bias", Tensor::zeros(&[1]))?;
    }
    match cfg.mode {
        EmbedMode::Softmax => {
            layers::init_linear(store, "embed.lift", 1, d, rng)?;
            store.insert("embed.position", layers::uniform(rng, &[geo.tokens, d], 0.1))?;
            for l in 0..cfg.embed_layers {
                let parts = if l + 1 == cfg.embed_layers {
                    BlockParts::ScoresOnly
                } else {
                    BlockParts::Full
                };
                layers::init_block(store, &format!("embed.layers.{l}"), d, 2 * d, parts, rng)?;
            }
        }
        _ => {
            let nets: &[&str] = if cfg.tie_qk { &["embed.qk"] } else { &["embed.query", "embed.key"] };
            for net in nets {
                for i in 0..cfg.kernel_mlp_depth {
                    let fan_in = if i == 0 { 1 } else { d };
                    layers::init_linear(store, &format!("{net}.{i}"), fan_in, d, rng)?;
                }
            }
        }
    }
    layers::init_linear(store, "embed.proj", geo.acat_width, cfg.out_dim, rng)?;
    Ok(geo)
}

/// Graph handles produced by one embedding pass.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    /// `[blocks, D]`.
    pub embeddings: Var,
    /// `[blocks, acat_width]`: harvested attention rows, kernel scores, or
    /// raw patch values.
    pub acat: Var,
    /// Softmax mode: per-layer `[blocks * heads * n, n]` probabilities.
    pub probs: Vec<Var>,
    pub blocks: usize,
    pub tokens: usize,
}

impl EmbedTrace {
    /// The attention matrices of one block (window).
    pub fn bundle(&self, g: &Graph, block: usize, heads: usize) -> Result<AttentionBundle> {
        if block >= self.blocks {
            return Err(Error::Argument(format!("block {block} of {}", self.blocks)));
        }
        let n = self.tokens;
        let layers = self
            .probs
            .iter()
            .map(|&p| {
                let v = g.value(p);
                (0..heads)
                    .map(|h| {
                        let start = (block * heads + h) * n * n;
                        Tensor::new(vec![n, n], v[start..start + n * n].to_vec())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionBundle { layers })
    }
}

/// Per layer, per head: a row-stochastic `(G+W) x (G+W)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionBundle {
    /// Largest `|row sum - 1|` over every row of every matrix.
    pub fn max_row_sum_error(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|m| {
                let n = m.shape()[1];
                m.data().chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|m| m.data().iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// A window's embedding together with its pre-projection vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub acat: Vec<f64>,
}

/// Embed pre-built token blocks. `tokens` is `[blocks * n, 1]`, each block
/// holding `landmarks` landmark values followed by the window values.
pub fn embed_tokens(
    g: &mut Graph,
    cfg: &EmbedConfig,
    tokens: Var,
    blocks: usize,
    landmarks: usize,
) -> Result<EmbedTrace> {
    let rows = g.shape(tokens)[0];
    if blocks == 0 || rows % blocks != 0 {
        return Err(Error::Dimension(format!("{rows} tokens into {blocks} blocks")));
    }
    let n = rows / blocks;
    let heads = cfg.embed_heads;
    let smoothing = cfg.smoothing(landmarks);
    let (acat, probs) = match cfg.mode {
        EmbedMode::Softmax => {
            let mut x = layers::linear(g, tokens, "embed.lift")?;
            let pos = g.param("embed.position")?;
            x = g.add_tiled(x, pos)?;
            let mut probs = Vec::with_capacity(cfg.embed_layers);
            for l in 0..cfg.embed_layers {
                let parts = if l + 1 == cfg.embed_layers {
                    BlockParts::ScoresOnly
                } else {
                    BlockParts::Full
                };
                let prefix = format!("embed.layers.{l}");
                let out =
                    layers::block_forward(g, x, &prefix, blocks, heads, smoothing, parts, None)?;
                x = out.hidden;
                probs.push(out.probs);
            }
            let mut rows_by_layer = Vec::with_capacity(probs.len());
            for &p in &probs {
                // last query row of every (block, head) matrix
                let idx = (0..blocks * heads)
                    .flat_map(|bh| {
                        let base = (bh * n + n - 1) * n;
                        base..base + n
                    })
                    .collect();
                rows_by_layer.push(g.gather(p, idx, vec![blocks, heads * n])?);
            }
            let acat = if rows_by_layer.len() == 1 {
                rows_by_layer[0]
            } else {
                g.concat_cols(&rows_by_layer)?
            };
            (acat, probs)
        }
        EmbedMode::Rbf | EmbedMode::Poly => {
            let kind = cfg.kernel()?;
            let (qnet, knet) = if cfg.tie_qk {
                ("embed.qk", "embed.qk")
            } else {
                ("embed.query", "embed.key")
            };
            let mut q = kernel_mlp(g, tokens, qnet, cfg.kernel_mlp_depth)?;
            let mut k = if cfg.tie_qk {
                q
            } else {
                kernel_mlp(g, tokens, knet, cfg.kernel_mlp_depth)?
            };
            if let Some(s) = smoothing {
                q = g.ema(q, n, s.start, s.alpha)?;
                k = if cfg.tie_qk { q } else { g.ema(k, n, s.start, s.alpha)? };
            }
            let mut scores = g.kernel_scores(q, k, blocks, heads, kind)?;
            if cfg.normalize_kernel_rows {
                scores = g.normalize_segments(scores, n)?;
            }
            (scores, Vec::new())
        }
        EmbedMode::Patch => {
            return Err(Error::config("mode", "patch mode has no token stage"));
        }
    };
    let embeddings = layers::linear(g, acat, "embed.proj")?;
    Ok(EmbedTrace {
        embeddings,
        acat,
        probs,
        blocks,
        tokens: n,
    })
}

fn kernel_mlp(g: &mut Graph, tokens: Var, prefix: &str, depth: usize) -> Result<Var> {
    let mut x = layers::linear(g, tokens, &format!("{prefix}.0"))?;
    for i in 1..depth {
        x = g.gelu(x);
        x = layers::linear(g, x, &format!("{prefix}.{i}"))?;
    }
    Ok(x)
}

/// Embed every window of every row of `series` (`[samples, L]`, already
/// normalized). Output embeddings are `[samples * N, D]`, sample-major.
pub fn embed_lookbacks(g: &mut Graph, cfg: &EmbedConfig, series: Var) -> Result<EmbedTrace> {
    let (samples, lookback) = {
        let s = g.shape(series);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("lookback batch has shape {s:?}")));
        }
        (s[0], s[1])
    };
    let geo = cfg.geometry(lookback)?;
    let (w, stride, nw) = (cfg.window_size, cfg.stride, geo.n_windows);
    let blocks = samples * nw;
    if cfg.mode == EmbedMode::Patch {
        let idx = (0..samples)
            .flat_map(|s| (0..nw).flat_map(move |i| (0..w).map(move |t| s * lookback + i * stride + t)))
            .collect();
        let windows = g.gather(series, idx, vec![blocks, w])?;
        let embeddings = layers::linear(g, windows, "embed.patch")?;
        return Ok(EmbedTrace {
            embeddings,
            acat: windows,
            probs: Vec::new(),
            blocks,
            tokens: w,
        });
    }
    let gl = geo.landmarks;
    let (source, width) = if gl > 0 {
        let marks = landmark_conv(g, cfg, series)?;
        (g.concat_cols(&[marks, series])?, gl + lookback)
    } else {
        (series, lookback)
    };
    let n = geo.tokens;
    let mut idx = Vec::with_capacity(blocks * n);
    for s in 0..samples {
        for i in 0..nw {
            let base = s * width;
            idx.extend((0..gl).map(|j| base + j));
            idx.extend((0..w).map(|t| base + gl + i * stride + t));
        }
    }
    let tokens = g.gather(source, idx, vec![blocks * n, 1])?;
    embed_tokens(g, cfg, tokens, blocks, gl)
}

fn landmark_conv(g: &mut Graph, cfg: &EmbedConfig, series: Var) -> Result<Var> {
    let w = g.param("embed.landmark.weight")?;
    let b = g.param("embed.landmark.bias")?;
    g.conv1d_valid(series, w, b, cfg.landmark_stride)
}

/// Landmark values of one normalized lookback.
pub fn compute_landmarks(u_norm: &[f64], cfg: &EmbedConfig, params: &ParamStore) -> Result<Vec<f64>> {
    if cfg.landmark_count(u_norm.len())? == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::with_params(params);
    let x = g.constant(Tensor::new(vec![1, u_norm.len()], u_norm.to_vec())?);
    let marks = landmark_conv(&mut g, cfg, x)?;
    Ok(g.value(marks).to_vec())
}

/// `y_1 = x_1`, `y_t = alpha x_t + (1 - alpha) y_{t-1}` down the rows of
/// `x` (time along rows, features along columns).
pub fn ema_smooth(x: &Tensor, alpha: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let rows = x.matrix_dims().0;
    let y = g.ema(v, rows, 0, alpha)?;
    Ok(g.tensor(y))
}

fn single_window(
    g: &mut Graph,
    cfg: &EmbedConfig,
    window: &[f64],
    landmarks: &[f64],
) -> Result<EmbedTrace> {
    if window.len() != cfg.window_size {
        return Err(Error::Dimension(format!(
            "window of {} values, expected {}",
            window.len(),
            cfg.window_size
        )));
    }
    let expected = usize::from(cfg.use_landmarks);
    if expected == 0 && !landmarks.is_empty() || expected == 1 && landmarks.is_empty() {
        return Err(Error::Dimension(format!(
            "{} landmarks with use_landmarks = {}",
            landmarks.len(),
            cfg.use_landmarks
        )));
    }
    let values: Vec<f64> = landmarks.iter().chain(window).copied().collect();
    let n = values.len();
    let tokens = g.constant(Tensor::new(vec![n, 1], values)?);
    embed_tokens(g, cfg, tokens, 1, landmarks.len())
}

/// Softmax-mode embedding of a single window.
pub fn embed_window_softmax(
    window: &[f64],
    landmarks: &[f64],
    cfg: &EmbedConfig,
    params: &ParamStore,
) -> Result<(Embedding, AttentionBundle)> {
    if cfg.mode != EmbedMode::Softmax {
        return Err(Error::config("mode", "softmax embedding requires mode = softmax"));
    }
    let mut g = Graph::with_params(params);
    let trace = single_window(&mut g, cfg, window, landmarks)?;
    let bundle = trace.bundle(&g, 0, cfg.embed_heads)?;
    let emb = Embedding {
        values: g.value(trace.embeddings).to_vec(),
        acat: g.value(trace.acat).to_vec(),
    };
    Ok((emb, bundle))
}

/// Kernel-mode embedding of a single window.
pub fn embed_window_kernel(
    window: &[f64],
    landmarks: &[f64],
    cfg: &EmbedConfig,
    params: &ParamStore,
) -> Result<Embedding> {
    if !cfg.mode.is_kernel() {
        return Err(Error::config("mode", "kernel embedding requires mode = rbf or poly"));
    }
    let mut g = Graph::with_params(params);
    let trace = single_window(&mut g, cfg, window, landmarks)?;
    Ok(Embedding {
        values: g.value(trace.embeddings).to_vec(),
        acat: g.value(trace.acat).to_vec(),
    })
}

/// All `N` window embeddings of one normalized lookback.
pub fn embed_series(u_norm: &[f64], cfg: &EmbedConfig, params: &ParamStore) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::with_params(params);
    let x = g.constant(Tensor::new(vec![1, u_norm.len()], u_norm.to_vec())?);
    let trace = embed_lookbacks(&mut g, cfg, x)?;
    Ok(g.value(trace.embeddings)
        .chunks(cfg.out_dim)
        .map(<[f64]>::to_vec)
        .collect())
}
