//! Parameter initialization and the pre-norm transformer block shared by
//! the embedding stack and the encoder.

use rand::Rng as _;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape has no zero extent")
}

/// `{prefix}.weight` (`fan_in x fan_out`) and `{prefix}.bias`, both
/// uniform in `±1/sqrt(fan_in)`.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(rng, &[fan_in, fan_out], bound))?;
    store.insert(format!("{prefix}.bias"), uniform(rng, &[fan_out], bound))?;
    Ok(())
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::filled(&[dim], 1.0))?;
    store.insert(format!("{prefix}.offset"), Tensor::zeros(&[dim]))?;
    Ok(())
}

pub(crate) fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub(crate) fn norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let offset = g.param(&format!("{prefix}.offset"))?;
    g.layer_norm(x, gain, offset, LN_EPS)
}

/// Inverted dropout with its own random stream.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f64,
    pub rng: Rng,
}

impl Dropout {
    pub(crate) fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, mask)
    }
}

pub(crate) fn maybe_dropout(g: &mut Graph, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// Which parts of a block carry parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BlockParts {
    /// Attention scores only: the block's output is never consumed.
    ScoresOnly,
    Full,
}

pub(crate) fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
    parts: BlockParts,
    rng: &mut Rng,
) -> Result<()> {
    init_norm(store, &format!("{prefix}.norm1"), dim)?;
    init_linear(store, &format!("{prefix}.query"), dim, dim, rng)?;
    init_linear(store, &format!("{prefix}.key"), dim, dim, rng)?;
    if parts == BlockParts::Full {
        init_linear(store, &format!("{prefix}.value"), dim, dim, rng)?;
        init_linear(store, &format!("{prefix}.out"), dim, dim, rng)?;
        init_norm(store, &format!("{prefix}.norm2"), dim)?;
        init_linear(store, &format!("{prefix}.ffn1"), dim, ffn_dim, rng)?;
        init_linear(store, &format!("{prefix}.ffn2"), ffn_dim, dim, rng)?;
    }
    Ok(())
}

/// EMA over the query/key streams, rows `start..block` of every block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct QkSmoothing {
    pub start: usize,
    pub alpha: f64,
}

pub(crate) struct BlockOutput {
    /// Block output, or the input unchanged for [`BlockParts::ScoresOnly`].
    pub hidden: Var,
    /// `[blocks * heads * n, n]` attention probabilities.
    pub probs: Var,
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ FFN(LN(.))`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    blocks: usize,
    heads: usize,
    smoothing: Option<QkSmoothing>,
    parts: BlockParts,
    mut dropout: Option<&mut Dropout>,
) -> Result<BlockOutput> {
    let (rows, dim) = {
        let s = g.shape(x);
        (s[0], s[1])
    };
    let n = rows / blocks;
    let h = norm(g, x, &format!("{prefix}.norm1"))?;
    let mut q = linear(g, h, &format!("{prefix}.query"))?;
    let mut k = linear(g, h, &format!("{prefix}.key"))?;
    if let Some(s) = smoothing {
        q = g.ema(q, n, s.start, s.alpha)?;
        k = g.ema(k, n, s.start, s.alpha)?;
    }
    let scale = 1.0 / ((dim / heads) as f64).sqrt();
    let probs = g.attention_probs(q, k, blocks, heads, scale)?;
    if parts == BlockParts::ScoresOnly {
        return Ok(BlockOutput { hidden: x, probs });
    }
    let v = linear(g, h, &format!("{prefix}.value"))?;
    let mixed = g.attention_apply(probs, v, blocks, heads)?;
    let attn = linear(g, mixed, &format!("{prefix}.out"))?;
    let attn = maybe_dropout(g, attn, dropout.as_deref_mut())?;
    let x = g.add(x, attn)?;
    let h2 = norm(g, x, &format!("{prefix}.norm2"))?;
    let f = linear(g, h2, &format!("{prefix}.ffn1"))?;
    let f = g.gelu(f);
    let f = linear(g, f, &format!("{prefix}.ffn2"))?;
    let f = maybe_dropout(g, f, dropout.as_deref_mut())?;
    let hidden = g.add(x, f)?;
    Ok(BlockOutput { hidden, probs })
}
