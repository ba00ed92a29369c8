use std::collections::HashMap;

use super::{matrix_dims, GradBuffer, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Similarity used by [`Graph::kernel_scores`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    /// `exp(-gamma * |u - v|^2)`
    Rbf { gamma: f64 },
    /// `(u.v / sqrt(d_head) + coef)^degree`
    Poly { degree: u32, coef: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Recip(Var),
    Gelu(Var),
    Sum(Var),
    SqErrSum(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        temperature: f64,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Ema {
        x: Var,
        block: usize,
        start: usize,
        alpha: f64,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    AttnProbs {
        q: Var,
        k: Var,
        blocks: usize,
        heads: usize,
        scale: f64,
    },
    AttnApply {
        p: Var,
        v: Var,
        blocks: usize,
        heads: usize,
    },
    KernelScores {
        q: Var,
        k: Var,
        blocks: usize,
        heads: usize,
        kind: KernelKind,
    },
    NormalizeSegments {
        x: Var,
        seg: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// A dynamically recorded computation tape.
///
/// Nodes are appended in evaluation order and never mutated, so the tape
/// is its own topological order. A graph is single-threaded; independent
/// samples are evaluated on independent graphs.
#[derive(Debug)]
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: GradBuffer,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &GradBuffer {
        &self.params
    }

    pub fn into_params(self) -> GradBuffer {
        self.params
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// `c = a * b (+ beta * c)` on strided row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted buffer lengths cover every strided access for
    // the given extents, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn kernel_value(kind: KernelKind, q: &[f64], k: &[f64]) -> f64 {
    match kind {
        KernelKind::Rbf { gamma } => {
            let d2: f64 = q.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum();
            (-gamma * d2).exp()
        }
        KernelKind::Poly { degree, coef } => {
            let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
            (dot / (q.len() as f64).sqrt() + coef).powi(degree as i32)
        }
    }
}

impl<'p> Graph<'p> {
    /// Graph whose parameter leaves are read from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, deps: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor; gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Bind a stored parameter, reusing the leaf if it is already bound.
    pub fn param_by_id(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was created without a parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            shape: p.value.shape().to_vec(),
            value: p.value.data().to_vec(),
            op: Op::Param,
            needs_grad: p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let id = store.expect_id(name)?;
        Ok(self.param_by_id(id))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].shape)
    }

    // ---- arithmetic -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Add a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).len() != c {
            return Err(Error::Dimension(format!(
                "add_bias: {} columns, bias of {}",
                c,
                self.value(bias).len()
            )));
        }
        let bv = self.value(bias);
        let value: Vec<f64> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Add an `n x c` tile to each consecutive `n`-row block of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (n, tc) = self.dims(tile);
        if tc != c || r % n != 0 {
            return Err(Error::Dimension(format!(
                "add_tiled: {:?} with tile {:?}",
                self.shape(x),
                self.shape(tile)
            )));
        }
        let tv = self.value(tile);
        let value: Vec<f64> = self
            .value(x)
            .chunks(n * c)
            .flat_map(|block| block.iter().zip(tv).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddTiled(x, tile), &[x, tile]))
    }

    fn check_scalar(&self, s: Var, name: &str) -> Result<f64> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(format!("{name}: expected a single value")));
        }
        Ok(self.value(s)[0])
    }

    /// Multiply every entry by a single-valued node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar(s, "mul_scalar")?;
        let value = self.value(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::MulScalar(x, s), &[x, s]))
    }

    /// Add a single-valued node to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar(s, "add_scalar")?;
        let value = self.value(x).iter().map(|v| v + sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddScalar(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Scale(x, factor), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Exp(x), &[x])
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| 1.0 / v).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Recip(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// `sum((pred - target)^2)` as a scalar node.
    pub fn sq_err_sum(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).len() != self.value(target).len() {
            return Err(Error::Dimension(format!(
                "sq_err_sum: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let s = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(vec![1], vec![s], Op::SqErrSum(pred, target), &[pred, target]))
    }

    // ---- normalization ----------------------------------------------------

    /// Normalize each row to zero mean / unit (population) variance, then
    /// apply `gain` and `offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Argument("layer_norm: eps must be positive".into()));
        }
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(offset).len() != c {
            return Err(Error::Dimension(format!("layer_norm: width {c} vs affine")));
        }
        let xv = self.value(x);
        let (g, o) = (self.value(gain), self.value(offset));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + o[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            &[x, gain, offset],
        ))
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Argument("softmax: temperature must be positive".into()));
        }
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax: non-finite input".into()));
        }
        let (_, c) = self.dims(x);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(c) {
            softmax_into(row.iter().map(|v| v / temperature), &mut out);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, temperature }, &[x]))
    }

    /// Per-segment normalization of each row so every segment sums to one.
    pub fn normalize_segments(&mut self, x: Var, seg: usize) -> Result<Var> {
        let (_, c) = self.dims(x);
        if seg == 0 || c % seg != 0 {
            return Err(Error::Dimension(format!("normalize_segments: {c} by {seg}")));
        }
        let mut out = Vec::with_capacity(self.value(x).len());
        for s in self.value(x).chunks(seg) {
            let total: f64 = s.iter().sum();
            if total == 0.0 || !total.is_finite() {
                return Err(Error::Numeric("normalize_segments: degenerate segment sum".into()));
            }
            out.extend(s.iter().map(|v| v / total));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::NormalizeSegments { x, seg }, &[x]))
    }

    // ---- sequence ops -----------------------------------------------------

    /// Valid 1-D convolution of each row: `out[j] = b + sum_i w[i] x[j*stride + i]`.
    pub fn conv1d_valid(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (r, n) = self.dims(x);
        let k = self.value(w).len();
        if stride == 0 {
            return Err(Error::Argument("conv1d: stride must be positive".into()));
        }
        if k > n {
            return Err(Error::Dimension(format!("conv1d: kernel {k} exceeds length {n}")));
        }
        let bias = self.check_scalar(b, "conv1d bias")?;
        let out_len = (n - k) / stride + 1;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Vec::with_capacity(r * out_len);
        for row in xv.chunks(n) {
            for j in 0..out_len {
                let seg = &row[j * stride..j * stride + k];
                out.push(bias + seg.iter().zip(wv).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let shape = if self.shape(x).len() == 1 {
            vec![out_len]
        } else {
            vec![r, out_len]
        };
        Ok(self.push(shape, out, Op::Conv1d { x, w, b, stride }, &[x, w, b]))
    }

    /// Exponential moving average down the rows of each `block`-row group,
    /// restricted to rows `start..block`; earlier rows pass through.
    pub fn ema(&mut self, x: Var, block: usize, start: usize, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config("ema_alpha", format!("{alpha} outside (0, 1]")));
        }
        let (r, c) = self.dims(x);
        if block == 0 || r % block != 0 || start >= block {
            return Err(Error::Dimension(format!(
                "ema: {r} rows, block {block}, start {start}"
            )));
        }
        let mut out = self.value(x).to_vec();
        for b in 0..r / block {
            let base = b * block;
            for t in start + 1..block {
                for j in 0..c {
                    let prev = out[(base + t - 1) * c + j];
                    let cur = &mut out[(base + t) * c + j];
                    *cur = alpha * *cur + (1.0 - alpha) * prev;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Ema {
                x,
                block,
                start,
                alpha,
            },
            &[x],
        ))
    }

    /// `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::Dimension("gather: index out of range".into()));
        }
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Dimension("gather: shape does not match index count".into()));
        }
        let xv = self.value(x);
        let value = idx.iter().map(|&i| xv[i]).collect();
        Ok(self.push(shape, value, Op::Gather { x, idx }, &[x]))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_cols: nothing to concatenate".into()));
        };
        let (r, _) = self.dims(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Dimension(format!("concat_cols: rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape(x), &[x]))
    }

    // ---- attention --------------------------------------------------------

    fn attn_dims(&self, q: Var, k: Var, blocks: usize, heads: usize) -> Result<(usize, usize, usize)> {
        let (r, d) = self.dims(q);
        if self.dims(k) != (r, d) {
            return Err(Error::Dimension("attention: q/k shapes differ".into()));
        }
        if blocks == 0 || heads == 0 || r % blocks != 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: {r}x{d} into {blocks} blocks, {heads} heads"
            )));
        }
        Ok((r / blocks, d, d / heads))
    }

    /// Multi-head attention probabilities within each `n`-row block.
    ///
    /// Output has shape `[blocks * heads * n, n]`; row `(b*heads + h)*n + i`
    /// is `softmax_j(scale * q_i . k_j)` over head `h`'s column slice.
    pub fn attention_probs(
        &mut self,
        q: Var,
        k: Var,
        blocks: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (n, d, dh) = self.attn_dims(q, k, blocks, heads)?;
        let (qv, kv) = (self.value(q), self.value(k));
        let mut out = Vec::with_capacity(blocks * heads * n * n);
        let mut logits = vec![0.0; n];
        for b in 0..blocks {
            for h in 0..heads {
                for i in 0..n {
                    let qi = &qv[(b * n + i) * d + h * dh..][..dh];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = &kv[(b * n + j) * d + h * dh..][..dh];
                        *l = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                    }
                    softmax_into(logits.iter().copied(), &mut out);
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("attention: non-finite probabilities".into()));
        }
        Ok(self.push(
            vec![blocks * heads * n, n],
            out,
            Op::AttnProbs {
                q,
                k,
                blocks,
                heads,
                scale,
            },
            &[q, k],
        ))
    }

    /// Mix values with probabilities from [`Graph::attention_probs`];
    /// head outputs land in their own column slices.
    pub fn attention_apply(&mut self, p: Var, v: Var, blocks: usize, heads: usize) -> Result<Var> {
        let (r, d) = self.dims(v);
        if blocks == 0 || r % blocks != 0 || d % heads != 0 {
            return Err(Error::Dimension("attention_apply: value layout".into()));
        }
        let n = r / blocks;
        let dh = d / heads;
        if self.shape(p) != [blocks * heads * n, n] {
            return Err(Error::Dimension(format!(
                "attention_apply: probs {:?} for {blocks}x{heads}x{n}",
                self.shape(p)
            )));
        }
        let (pv, vv) = (self.value(p), self.value(v));
        let mut out = vec![0.0; r * d];
        for b in 0..blocks {
            for h in 0..heads {
                for i in 0..n {
                    let prow = &pv[((b * heads + h) * n + i) * n..][..n];
                    let o = &mut out[(b * n + i) * d + h * dh..][..dh];
                    for (j, &w) in prow.iter().enumerate() {
                        let vj = &vv[(b * n + j) * d + h * dh..][..dh];
                        o.iter_mut().zip(vj).for_each(|(a, c)| *a += w * c);
                    }
                }
            }
        }
        Ok(self.push(
            vec![r, d],
            out,
            Op::AttnApply {
                p,
                v,
                blocks,
                heads,
            },
            &[p, v],
        ))
    }

    /// Kernel similarity of each block's last query row against every key
    /// row, per head. Output `[blocks, heads * n]`.
    pub fn kernel_scores(
        &mut self,
        q: Var,
        k: Var,
        blocks: usize,
        heads: usize,
        kind: KernelKind,
    ) -> Result<Var> {
        let (n, d, dh) = self.attn_dims(q, k, blocks, heads)?;
        let (qv, kv) = (self.value(q), self.value(k));
        let mut out = Vec::with_capacity(blocks * heads * n);
        for b in 0..blocks {
            for h in 0..heads {
                let qi = &qv[(b * n + n - 1) * d + h * dh..][..dh];
                for j in 0..n {
                    let kj = &kv[(b * n + j) * d + h * dh..][..dh];
                    out.push(kernel_value(kind, qi, kj));
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("kernel scores overflowed".into()));
        }
        Ok(self.push(
            vec![blocks, heads * n],
            out,
            Op::KernelScores {
                q,
                k,
                blocks,
                heads,
                kind,
            },
            &[q, k],
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients of nodes used more than once accumulate additively, and
    /// the sweep visits nodes in reverse recording order, so results are
    /// bit-reproducible.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::Numeric("backward from a non-finite loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params = GradBuffer::new(self.store.map_or(0, ParamStore::len));
        let mut bound: Vec<_> = self.bound.iter().collect();
        bound.sort();
        for (&id, &v) in bound {
            if let Some(g) = &grads[v.0] {
                if self.nodes[v.0].needs_grad {
                    params.add(id, g);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(ga) = slot!(*a) {
                    // dA += dC . B^T
                    gemm(m, n, k, g, (n, 1), &nodes[b.0].value, (1, n), 1.0, ga);
                }
                if let Some(gb) = slot!(*b) {
                    // dB += A^T . dC
                    gemm(k, m, n, &nodes[a.0].value, (1, k), g, (n, 1), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(*a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if let Some(gb) = slot!(*b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::AddTiled(x, t) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if let Some(gt) = slot!(*t) {
                    let len = gt.len();
                    for block in g.chunks(len) {
                        gt.iter_mut().zip(block).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let sv = nodes[s.0].value[0];
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y * sv);
                }
                if let Some(gs) = slot!(*s) {
                    gs[0] += g.iter().zip(&nodes[x.0].value).map(|(y, v)| y * v).sum::<f64>();
                }
            }
            Op::AddScalar(x, s) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if let Some(gs) = slot!(*s) {
                    gs[0] += g.iter().sum::<f64>();
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y * f);
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((a, y), o) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a += y * o;
                    }
                }
            }
            Op::Recip(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((a, y), o) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a -= y * o * o;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot!(*x) {
                    for ((a, y), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += y * gelu_parts(v).1;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SqErrSum(p, t) => {
                let (pv, tv) = (&nodes[p.0].value, &nodes[t.0].value);
                if let Some(gp) = slot!(*p) {
                    for ((a, x), y) in gp.iter_mut().zip(pv).zip(tv) {
                        *a += 2.0 * g[0] * (x - y);
                    }
                }
                if let Some(gt) = slot!(*t) {
                    for ((a, x), y) in gt.iter_mut().zip(pv).zip(tv) {
                        *a -= 2.0 * g[0] * (x - y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let c = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                if let Some(gg) = slot!(*gain) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(go) = slot!(*offset) {
                    for grow in g.chunks(c) {
                        go.iter_mut().zip(grow).for_each(|(a, y)| *a += y);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dh = vec![0.0; c];
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                let c = node.shape[node.shape.len() - 1];
                if let Some(gx) = slot!(*x) {
                    for (r, (grow, yrow)) in g.chunks(c).zip(node.value.chunks(c)).enumerate() {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += yrow[j] * (grow[j] - dot) / temperature;
                        }
                    }
                }
            }
            Op::NormalizeSegments { x, seg } => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot!(*x) {
                    for ((out, gs), (xs, ys)) in gx
                        .chunks_mut(*seg)
                        .zip(g.chunks(*seg))
                        .zip(xv.chunks(*seg).zip(node.value.chunks(*seg)))
                    {
                        let total: f64 = xs.iter().sum();
                        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for j in 0..*seg {
                            out[j] += (gs[j] - dot) / total;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (_, n) = matrix_dims(&nodes[x.0].shape);
                let k = wv.len();
                let out_len = (n - k) / stride + 1;
                if let Some(gb) = slot!(*b) {
                    gb[0] += g.iter().sum::<f64>();
                }
                if let Some(gw) = slot!(*w) {
                    for (row, grow) in xv.chunks(n).zip(g.chunks(out_len)) {
                        for (j, &y) in grow.iter().enumerate() {
                            for i in 0..k {
                                gw[i] += y * row[j * stride + i];
                            }
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    for (r, grow) in g.chunks(out_len).enumerate() {
                        for (j, &y) in grow.iter().enumerate() {
                            for i in 0..k {
                                gx[r * n + j * stride + i] += y * wv[i];
                            }
                        }
                    }
                }
            }
            Op::Ema {
                x,
                block,
                start,
                alpha,
            } => {
                let (r, c) = matrix_dims(&node.shape);
                if let Some(gx) = slot!(*x) {
                    let mut carry = vec![0.0; c];
                    for b in 0..r / block {
                        let base = b * block;
                        for t in 0..*start {
                            let row = (base + t) * c;
                            for j in 0..c {
                                gx[row + j] += g[row + j];
                            }
                        }
                        carry.iter_mut().for_each(|v| *v = 0.0);
                        for t in (*start..*block).rev() {
                            let row = (base + t) * c;
                            for j in 0..c {
                                let total = g[row + j] + carry[j];
                                if t == *start {
                                    gx[row + j] += total;
                                } else {
                                    gx[row + j] += alpha * total;
                                    carry[j] = (1.0 - alpha) * total;
                                }
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = slot!(*x) {
                    for (&j, y) in idx.iter().zip(g) {
                        gx[j] += y;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = matrix_dims(&nodes[p.0].shape);
                    if let Some(gp) = slot!(p) {
                        for i in 0..r {
                            let src = &g[i * total + offset..][..w];
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, y)| *a += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
            }
            Op::AttnProbs {
                q,
                k,
                blocks,
                heads,
                scale,
            } => {
                let (rows, d) = matrix_dims(&nodes[q.0].shape);
                let n = rows / blocks;
                let dh = d / heads;
                let (qv, kv) = (&nodes[q.0].value, &nodes[k.0].value);
                let mut ds_all = vec![0.0; node.value.len()];
                for ((ds, grow), prow) in ds_all
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(node.value.chunks(n))
                {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ds[j] = prow[j] * (grow[j] - dot) * scale;
                    }
                }
                if let Some(gq) = slot!(*q) {
                    for b in 0..*blocks {
                        for h in 0..*heads {
                            for i in 0..n {
                                let ds = &ds_all[((b * heads + h) * n + i) * n..][..n];
                                let gi = &mut gq[(b * n + i) * d + h * dh..][..dh];
                                for (j, &w) in ds.iter().enumerate() {
                                    let kj = &kv[(b * n + j) * d + h * dh..][..dh];
                                    gi.iter_mut().zip(kj).for_each(|(a, c)| *a += w * c);
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = slot!(*k) {
                    for b in 0..*blocks {
                        for h in 0..*heads {
                            for i in 0..n {
                                let ds = &ds_all[((b * heads + h) * n + i) * n..][..n];
                                let qi = &qv[(b * n + i) * d + h * dh..][..dh];
                                for (j, &w) in ds.iter().enumerate() {
                                    let gj = &mut gk[(b * n + j) * d + h * dh..][..dh];
                                    gj.iter_mut().zip(qi).for_each(|(a, c)| *a += w * c);
                                }
                            }
                        }
                    }
                }
            }
            Op::AttnApply {
                p,
                v,
                blocks,
                heads,
            } => {
                let (rows, d) = matrix_dims(&nodes[v.0].shape);
                let n = rows / blocks;
                let dh = d / heads;
                let (pv, vv) = (&nodes[p.0].value, &nodes[v.0].value);
                if let Some(gp) = slot!(*p) {
                    for b in 0..*blocks {
                        for h in 0..*heads {
                            for i in 0..n {
                                let go = &g[(b * n + i) * d + h * dh..][..dh];
                                let prow = &mut gp[((b * heads + h) * n + i) * n..][..n];
                                for (j, a) in prow.iter_mut().enumerate() {
                                    let vj = &vv[(b * n + j) * d + h * dh..][..dh];
                                    *a += go.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                if let Some(gv) = slot!(*v) {
                    for b in 0..*blocks {
                        for h in 0..*heads {
                            for i in 0..n {
                                let go = &g[(b * n + i) * d + h * dh..][..dh];
                                let prow = &pv[((b * heads + h) * n + i) * n..][..n];
                                for (j, &w) in prow.iter().enumerate() {
                                    let gj = &mut gv[(b * n + j) * d + h * dh..][..dh];
                                    gj.iter_mut().zip(go).for_each(|(a, c)| *a += w * c);
                                }
                            }
                        }
                    }
                }
            }
            Op::KernelScores {
                q,
                k,
                blocks,
                heads,
                kind,
            } => {
                let (rows, d) = matrix_dims(&nodes[q.0].shape);
                let n = rows / blocks;
                let dh = d / heads;
                let (qv, kv) = (&nodes[q.0].value, &nodes[k.0].value);
                // d score / d q = coeff * dir_q, d score / d k = coeff * dir_k
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                for b in 0..*blocks {
                    let qrow = (b * n + n - 1) * d;
                    for h in 0..*heads {
                        let qi = &qv[qrow + h * dh..][..dh];
                        for j in 0..n {
                            let krow = (b * n + j) * d + h * dh;
                            let kj = &kv[krow..krow + dh];
                            let y = g[b * heads * n + h * n + j];
                            let s = node.value[b * heads * n + h * n + j];
                            match *kind {
                                KernelKind::Rbf { gamma } => {
                                    let c = -2.0 * gamma * s * y;
                                    for t in 0..dh {
                                        let diff = qi[t] - kj[t];
                                        dq[qrow + h * dh + t] += c * diff;
                                        dk[krow + t] -= c * diff;
                                    }
                                }
                                KernelKind::Poly { degree, coef } => {
                                    let root = (dh as f64).sqrt();
                                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                                    let base = dot / root + coef;
                                    let c = y * degree as f64 * base.powi(degree as i32 - 1) / root;
                                    for t in 0..dh {
                                        dq[qrow + h * dh + t] += c * kj[t];
                                        dk[krow + t] += c * qi[t];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gq) = slot!(*q) {
                    gq.iter_mut().zip(&dq).for_each(|(a, y)| *a += y);
                }
                if let Some(gk) = slot!(*k) {
                    gk.iter_mut().zip(&dk).for_each(|(a, y)| *a += y);
                }
            }
        }
    }
}

/// Accumulation target for a parent, or None if it needs no gradient.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Append `softmax(logits)` to `out` using max subtraction.
fn softmax_into<I: Iterator<Item = f64> + Clone>(logits: I, out: &mut Vec<f64>) {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for l in logits {
        let e = (l - max).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|v| *v /= total);
}
