//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation applied through a [`Tape`] appends a node holding the
//! result value and the rule needed to propagate gradients back to its
//! inputs. Nodes are only ever appended after their inputs, so walking the
//! tape from the end to the start visits them in reverse topological order
//! and each node's backward rule runs exactly once.
//!
//! ```
//! use attd_core::numcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(&[1.0, 2.0, 3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::sync::Arc;

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block: a run of query rows attending over a run of key rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Block-diagonal attention structure over packed query and key rows.
///
/// Packing many short sequences into one matrix lets the projections run as
/// a single matmul while attention stays confined to each segment.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    segments: Vec<Segment>,
    offsets: Vec<usize>,
    heads: usize,
    q_rows: usize,
    k_rows: usize,
    total: usize,
}

impl AttnLayout {
    pub fn new(segments: Vec<Segment>, heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Dimension("attention needs at least one head".into()));
        }
        if segments.is_empty() {
            return Err(Error::Dimension("attention layout has no segments".into()));
        }
        let mut offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        let mut q_rows = 0;
        let mut k_rows = 0;
        for s in &segments {
            if s.q_len == 0 || s.k_len == 0 {
                return Err(Error::Dimension(format!("empty attention segment {s:?}")));
            }
            offsets.push(total);
            total += heads * s.q_len * s.k_len;
            q_rows = q_rows.max(s.q_start + s.q_len);
            k_rows = k_rows.max(s.k_start + s.k_len);
        }
        Ok(Self {
            segments,
            offsets,
            heads,
            q_rows,
            k_rows,
            total,
        })
    }

    /// Self-attention layout: each segment attends within its own rows.
    pub fn self_attention(lengths: &[usize], heads: usize) -> Result<Self> {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = Segment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                s
            })
            .collect();
        Self::new(segments, heads)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Offset of the `[q_len × k_len]` probability block for `(segment, head)`.
    pub fn block_offset(&self, segment: usize, head: usize) -> usize {
        let s = &self.segments[segment];
        self.offsets[segment] + head * s.q_len * s.k_len
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    IndexRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        eps: f64,
    },
    ForwardKl {
        p: Var,
        q: Var,
        eps: f64,
    },
    AttnScores {
        q: Var,
        k: Var,
        layout: Arc<AttnLayout>,
        scale: f64,
    },
    AttnApply {
        probs: Var,
        v: Var,
        layout: Arc<AttnLayout>,
    },
    AttnClsMean {
        probs: Var,
        layout: Arc<AttnLayout>,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass plus its backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records an input tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `x` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient of the last backward pass for a `requires_grad` leaf.
    pub fn grad(&self, x: Var) -> Option<&Tensor> {
        self.grads.get(x.0).and_then(Option::as_ref)
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    fn matrix_dims(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ----------------------------------------------------------------
    // Forward operations

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions differ for shapes [{m}, {k}] and [{k2}, {n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            0.0,
            &mut out,
            Layout::row_major(n),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise op")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[n]` vector to every length-`n` row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Dimension(format!(
                "add_row: bias shape {:?} does not match rows of {:?}",
                self.shape(bias),
                self.shape(a)
            )));
        }
        let b = self.value(bias).data();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| src[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalises each length-`d` slice over the last axis, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Input(format!("layer_norm eps must be positive, got {eps}")));
        }
        let t = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Gathers rows of `x` (viewed as `[rows, last_dim]`). Serves as
    /// embedding lookup, row selection and row repetition.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let rows = t.rows();
        if idx.is_empty() {
            return Err(Error::Input("index_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return Err(Error::Input(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idx.len(), n], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::IndexRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks the rows of several tensors with equal last dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat_rows of nothing".into()));
        };
        let n = self.value(first).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.last_dim() != n {
                return Err(Error::Dimension(format!(
                    "concat_rows: width {} differs from {n}",
                    t.last_dim()
                )));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / n;
        let value = Tensor::new(vec![rows, n], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Per-row `-ln(max(p[target], eps))` for a batch of distributions.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let t = self.value(probs);
        let c = t.last_dim();
        if t.rows() != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} rows but {} targets",
                t.rows(),
                targets.len()
            )));
        }
        let mut out = Vec::with_capacity(targets.len());
        for (r, &a) in targets.iter().enumerate() {
            if a >= c {
                return Err(Error::Input(format!(
                    "target index {a} out of range for {c} classes"
                )));
            }
            out.push(-t.row(r)[a].max(eps).ln());
        }
        let value = Tensor::vector(&out);
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Per-row `Σ p·ln((p+eps)/(q+eps))`; terms with `p == 0` contribute 0.
    pub fn forward_kl(&mut self, p: Var, q: Var, eps: f64) -> Result<Var> {
        self.same_shape(p, q, "forward_kl")?;
        let tp = self.value(p);
        let tq = self.value(q);
        let out: Vec<f64> = (0..tp.rows())
            .map(|r| kl_row(tp.row(r), tq.row(r), eps))
            .collect();
        let value = Tensor::vector(&out);
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(value, Op::ForwardKl { p, q, eps }, rg))
    }

    /// Multi-head scaled dot-product attention probabilities.
    ///
    /// `q` and `k` are packed `[rows, d]` matrices. The result is a flat
    /// tensor holding one row-stochastic `[q_len × k_len]` block per
    /// `(segment, head)`, addressed by [`AttnLayout::block_offset`].
    pub fn attn_scores(&mut self, q: Var, k: Var, layout: &Arc<AttnLayout>) -> Result<Var> {
        let (qr, d) = self.matrix_dims(q, "attention queries")?;
        let (kr, d2) = self.matrix_dims(k, "attention keys")?;
        let heads = layout.heads;
        if d != d2 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: query width {d}, key width {d2}, heads {heads}"
            )));
        }
        if layout.q_rows > qr || layout.k_rows > kr {
            return Err(Error::Dimension(format!(
                "attention layout needs {}×{} rows, got {qr}×{kr}",
                layout.q_rows, layout.k_rows
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut out = vec![0.0; layout.total];
        for (si, s) in layout.segments.iter().enumerate() {
            for h in 0..heads {
                let off = layout.block_offset(si, h);
                let block = &mut out[off..off + s.q_len * s.k_len];
                gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    scale,
                    &qd[s.q_start * d + h * dh..],
                    Layout::row_major(d),
                    &kd[s.k_start * d + h * dh..],
                    Layout::transposed(d),
                    0.0,
                    block,
                    Layout::row_major(s.k_len),
                );
                for row in block.chunks_exact_mut(s.k_len) {
                    softmax_in_place(row);
                }
            }
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("attention scores are not finite".into()));
        }
        let value = Tensor::new(vec![layout.total], out)?;
        let rg = self.any_grad(&[q, k]);
        Ok(self.push(
            value,
            Op::AttnScores {
                q,
                k,
                layout: Arc::clone(layout),
                scale,
            },
            rg,
        ))
    }

    /// Applies attention probabilities from [`Tape::attn_scores`] to values,
    /// writing each head into its column band of a `[q_rows, d]` output.
    pub fn attn_apply(&mut self, probs: Var, v: Var, layout: &Arc<AttnLayout>) -> Result<Var> {
        let (vr, d) = self.matrix_dims(v, "attention values")?;
        let heads = layout.heads;
        if self.shape(probs) != [layout.total] || d % heads != 0 || layout.k_rows > vr {
            return Err(Error::Dimension(format!(
                "attn_apply: probs {:?}, values {:?} incompatible with layout",
                self.shape(probs),
                self.shape(v)
            )));
        }
        let dh = d / heads;
        let pd = self.value(probs).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; layout.q_rows * d];
        for (si, s) in layout.segments.iter().enumerate() {
            for h in 0..heads {
                let off = layout.block_offset(si, h);
                gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    1.0,
                    &pd[off..],
                    Layout::row_major(s.k_len),
                    &vd[s.k_start * d + h * dh..],
                    Layout::row_major(d),
                    1.0,
                    &mut out[s.q_start * d + h * dh..],
                    Layout::row_major(d),
                );
            }
        }
        let value = Tensor::new(vec![layout.q_rows, d], out)?;
        let rg = self.any_grad(&[probs, v]);
        Ok(self.push(
            value,
            Op::AttnApply {
                probs,
                v,
                layout: Arc::clone(layout),
            },
            rg,
        ))
    }

    /// Head-averaged attention row of the first query of every segment,
    /// as a `[segments, k_len]` matrix. All segments must share `k_len`.
    pub fn attn_cls_mean(&mut self, probs: Var, layout: &Arc<AttnLayout>) -> Result<Var> {
        if self.shape(probs) != [layout.total] {
            return Err(Error::Dimension("attn_cls_mean: probs do not match layout".into()));
        }
        let k_len = layout.segments[0].k_len;
        if layout.segments.iter().any(|s| s.k_len != k_len) {
            return Err(Error::Dimension(
                "attn_cls_mean needs equal key lengths across segments".into(),
            ));
        }
        let heads = layout.heads;
        let pd = self.value(probs).data();
        let mut out = vec![0.0; layout.segments.len() * k_len];
        for si in 0..layout.segments.len() {
            let dst = &mut out[si * k_len..(si + 1) * k_len];
            for h in 0..heads {
                let off = layout.block_offset(si, h);
                for (o, &p) in dst.iter_mut().zip(&pd[off..off + k_len]) {
                    *o += p;
                }
            }
            for o in dst.iter_mut() {
                *o /= heads as f64;
            }
        }
        let value = Tensor::new(vec![layout.segments.len(), k_len], out)?;
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            value,
            Op::AttnClsMean {
                probs,
                layout: Arc::clone(layout),
            },
            rg,
        ))
    }

    /// Batched matmul: `a` is `[batch·m, k]`, `b` is `[batch·k, n]`, and
    /// block `i` of the `[batch·m, n]` result is `a_i · b_i`.
    pub fn bmm(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ar, k) = self.matrix_dims(a, "bmm lhs")?;
        let (br, n) = self.matrix_dims(b, "bmm rhs")?;
        if batch == 0 || ar % batch != 0 || br != batch * k {
            return Err(Error::Dimension(format!(
                "bmm: shapes [{ar}, {k}] and [{br}, {n}] incompatible with batch {batch}"
            )));
        }
        let m = ar / batch;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; ar * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &ad[i * m * k..],
                Layout::row_major(k),
                &bd[i * k * n..],
                Layout::row_major(n),
                0.0,
                &mut out[i * m * n..],
                Layout::row_major(n),
            );
        }
        let value = Tensor::new(vec![ar, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Bmm { a, b, batch }, rg))
    }

    // ----------------------------------------------------------------
    // Backward

    /// Propagates gradients from the scalar `loss` to every reachable
    /// `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract(
                "loss is not reachable from any requires_grad leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g)
                        .expect("gradient has the value's shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        Layout::row_major(n),
                        self.value(*b).data(),
                        Layout::transposed(n),
                        1.0,
                        ga,
                        Layout::row_major(k),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        self.value(*a).data(),
                        Layout::transposed(k),
                        g,
                        Layout::row_major(n),
                        1.0,
                        gb,
                        Layout::row_major(n),
                    );
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.shape(*a));
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g, |x| x);
                self.accumulate(grads, *b, g, |x| x);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g, |x| x);
                self.accumulate(grads, *b, g, |x| -x);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g, |x| x);
                let n = self.shape(*bias)[0];
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(n) {
                        for (d, &gi) in gb.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g, |x| x * c);
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(a) => {
                let g0 = g[0] / self.value(*a).numel() as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g, |x| x),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * n * inner + ii;
                            let dot: f64 = (0..n)
                                .map(|j| g[base + j * inner] * out[base + j * inner])
                                .sum();
                            for j in 0..n {
                                let idx = base + j * inner;
                                gx[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &inv) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += inv * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row_g in g.chunks_exact(d) {
                        for j in 0..d {
                            gb[j] += row_g[j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *d += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::IndexRows { x, idx } => {
                let n = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, &g[off..off + len], |x| x);
                    off += len;
                }
            }
            Op::CrossEntropy {
                probs,
                targets,
                eps,
            } => {
                let pv = self.value(*probs);
                let c = pv.last_dim();
                if let Some(gp) = self.slot(grads, *probs) {
                    for (r, &a) in targets.iter().enumerate() {
                        let p = pv.row(r)[a];
                        if p > *eps {
                            gp[r * c + a] -= g[r] / p;
                        }
                    }
                }
            }
            Op::ForwardKl { p, q, eps } => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let c = pv.last_dim();
                if let Some(gp) = self.slot(grads, *p) {
                    for r in 0..pv.rows() {
                        for (j, (&pi, &qi)) in pv.row(r).iter().zip(qv.row(r)).enumerate() {
                            let d = ((pi + eps) / (qi + eps)).ln() + pi / (pi + eps);
                            gp[r * c + j] += g[r] * d;
                        }
                    }
                }
                if let Some(gq) = self.slot(grads, *q) {
                    for r in 0..pv.rows() {
                        for (j, (&pi, &qi)) in pv.row(r).iter().zip(qv.row(r)).enumerate() {
                            gq[r * c + j] -= g[r] * pi / (qi + eps);
                        }
                    }
                }
            }
            Op::AttnScores {
                q,
                k,
                layout,
                scale,
            } => self.backprop_attn_scores(*q, *k, layout, *scale, out, g, grads),
            Op::AttnApply { probs, v, layout } => {
                let d = self.shape(*v)[1];
                let dh = d / layout.heads;
                let pd = self.value(*probs).data();
                let vd = self.value(*v).data();
                if let Some(gp) = self.slot(grads, *probs) {
                    for (si, s) in layout.segments.iter().enumerate() {
                        for h in 0..layout.heads {
                            let off = layout.block_offset(si, h);
                            gemm(
                                s.q_len,
                                dh,
                                s.k_len,
                                1.0,
                                &g[s.q_start * d + h * dh..],
                                Layout::row_major(d),
                                &vd[s.k_start * d + h * dh..],
                                Layout::transposed(d),
                                1.0,
                                &mut gp[off..],
                                Layout::row_major(s.k_len),
                            );
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    for (si, s) in layout.segments.iter().enumerate() {
                        for h in 0..layout.heads {
                            let off = layout.block_offset(si, h);
                            gemm(
                                s.k_len,
                                s.q_len,
                                dh,
                                1.0,
                                &pd[off..],
                                Layout::transposed(s.k_len),
                                &g[s.q_start * d + h * dh..],
                                Layout::row_major(d),
                                1.0,
                                &mut gv[s.k_start * d + h * dh..],
                                Layout::row_major(d),
                            );
                        }
                    }
                }
            }
            Op::AttnClsMean { probs, layout } => {
                let k_len = layout.segments[0].k_len;
                let inv = 1.0 / layout.heads as f64;
                if let Some(gp) = self.slot(grads, *probs) {
                    for si in 0..layout.segments.len() {
                        for h in 0..layout.heads {
                            let off = layout.block_offset(si, h);
                            for j in 0..k_len {
                                gp[off + j] += g[si * k_len + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, batch } => {
                let (ar, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                let m = ar / batch;
                if let Some(ga) = self.slot(grads, *a) {
                    let bd = self.value(*b).data();
                    for i in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[i * m * n..],
                            Layout::row_major(n),
                            &bd[i * k * n..],
                            Layout::transposed(n),
                            1.0,
                            &mut ga[i * m * k..],
                            Layout::row_major(k),
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let ad = self.value(*a).data();
                    for i in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &ad[i * m * k..],
                            Layout::transposed(k),
                            &g[i * m * n..],
                            Layout::row_major(n),
                            1.0,
                            &mut gb[i * k * n..],
                            Layout::row_major(n),
                        );
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attn_scores(
        &self,
        q: Var,
        k: Var,
        layout: &AttnLayout,
        scale: f64,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / layout.heads;
        // Gradient w.r.t. the pre-softmax scores, block by block.
        let mut ds = vec![0.0; layout.total];
        for (si, s) in layout.segments.iter().enumerate() {
            for h in 0..layout.heads {
                let off = layout.block_offset(si, h);
                for r in 0..s.q_len {
                    let base = off + r * s.k_len;
                    let p = &probs[base..base + s.k_len];
                    let gr = &g[base..base + s.k_len];
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..s.k_len {
                        ds[base + j] = p[j] * (gr[j] - dot);
                    }
                }
            }
        }
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        if let Some(gq) = self.slot(grads, q) {
            for (si, s) in layout.segments.iter().enumerate() {
                for h in 0..layout.heads {
                    let off = layout.block_offset(si, h);
                    gemm(
                        s.q_len,
                        s.k_len,
                        dh,
                        scale,
                        &ds[off..],
                        Layout::row_major(s.k_len),
                        &kd[s.k_start * d + h * dh..],
                        Layout::row_major(d),
                        1.0,
                        &mut gq[s.q_start * d + h * dh..],
                        Layout::row_major(d),
                    );
                }
            }
        }
        if let Some(gk) = self.slot(grads, k) {
            for (si, s) in layout.segments.iter().enumerate() {
                for h in 0..layout.heads {
                    let off = layout.block_offset(si, h);
                    gemm(
                        s.k_len,
                        s.q_len,
                        dh,
                        scale,
                        &ds[off..],
                        Layout::transposed(s.k_len),
                        &qd[s.q_start * d + h * dh..],
                        Layout::row_major(d),
                        1.0,
                        &mut gk[s.k_start * d + h * dh..],
                        Layout::row_major(d),
                    );
                }
            }
        }
    }

    /// Gradient buffer for `x`, created on first use; `None` when `x`
    /// does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], x: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[x.0].requires_grad {
            return None;
        }
        let numel = self.nodes[x.0].value.numel();
        Some(grads[x.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        f: impl Fn(f64) -> f64,
    ) {
        if let Some(gx) = self.slot(grads, x) {
            for (d, &gi) in gx.iter_mut().zip(g) {
                *d += f(gi);
            }
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `Σ p·ln((p+eps)/(q+eps))` over one pair of distributions.
pub(crate) fn kl_row(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi != 0.0)
        .map(|(&pi, &qi)| pi * ((pi + eps) / (qi + eps)).ln())
        .sum()
}
