//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! topologically sorted by construction. [`Tape::backward`] walks it once in
//! reverse and accumulates gradients into the tracked inputs.

mod kernels;
mod optim;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::{AttnGeom, ConvGeom};

pub use optim::{Adam, AdamConfig};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Train mode enables dropout and batch statistics in batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Statistics source for [`Tape::batchnorm1d`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch-norm call, used to
/// update running estimates. `var` is the unbiased sample variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Projection parameters of one multi-head attention layer. Weights are
/// `[d_model, d_model]`, biases `[d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SumSquares(Vec<Var>),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool1d {
        x: Var,
        arg: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Elu {
        x: Var,
        alpha: T,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Transpose {
        x: Var,
        outer: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    AddPositional {
        x: Var,
        pos: Var,
        batch: usize,
        span: usize,
    },
    ChannelFusion {
        x: Var,
        w: Var,
        batch: usize,
        bands: usize,
        ch: usize,
        mixed: usize,
        len: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Ordered record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / d.max(1), d)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    /// `sum_i ||x_i||^2` over several tensors, as a scalar.
    pub fn sum_squares(&mut self, xs: &[Var]) -> Var {
        let s = xs.iter().map(|&v| self.value(v).sum_squares()).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(xs.to_vec()), xs)
    }

    /// 1-D cross-correlation of `x: [batch, c_in, time]` with
    /// `w: [c_out, c_in, k]`. Same padding splits `k - 1` zeros as
    /// `(k - 1) / 2` on the left and the rest on the right.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::dim(format!("conv1d expects rank-3 input and weight, got {xs:?} and {ws:?}")));
        }
        let (batch, c_in, len_in) = (xs[0], xs[1], xs[2]);
        let (c_out, w_in, kernel) = (ws[0], ws[1], ws[2]);
        if w_in != c_in {
            return Err(Error::dim(format!("conv1d weight expects {w_in} input channels, input has {c_in}")));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be positive".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::dim(format!("conv1d bias shape {:?}, expected [{c_out}]", self.shape(b))));
            }
        }
        let (pad_left, len_out) = match padding {
            Padding::Same => {
                if stride != 1 {
                    return Err(Error::Parameter("same padding requires stride 1".into()));
                }
                ((kernel - 1) / 2, len_in)
            }
            Padding::Valid => {
                if kernel > len_in {
                    return Err(Error::dim(format!("kernel {kernel} longer than input {len_in}")));
                }
                (0, (len_in - kernel) / stride + 1)
            }
        };
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            len_in,
            len_out,
            kernel,
            pad_left,
            stride,
        };
        let y = kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new([batch, c_out, len_out], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv1d { x, w, b, geom }, &inputs))
    }

    /// Max pooling over the last axis of `[batch, ch, time]`. Padding
    /// positions act as negative infinity; same padding puts the odd pad on
    /// the right.
    pub fn maxpool1d(&mut self, x: Var, pool: usize, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim(format!("maxpool1d expects rank 3, got {xs:?}")));
        }
        if pool == 0 || stride == 0 {
            return Err(Error::Parameter("pool size and stride must be positive".into()));
        }
        let len_in = xs[2];
        let (pad_left, len_out) = match padding {
            Padding::Same => {
                let len_out = len_in.div_ceil(stride);
                let total = ((len_out - 1) * stride + pool).saturating_sub(len_in);
                (total / 2, len_out)
            }
            Padding::Valid => {
                if pool > len_in {
                    return Err(Error::dim(format!("pool {pool} longer than input {len_in}")));
                }
                (0, (len_in - pool) / stride + 1)
            }
        };
        let rows = xs[0] * xs[1];
        let (y, arg) = kernels::maxpool1d_forward(self.value(x).data(), rows, len_in, len_out, pool, stride, pad_left);
        let t = Tensor::new([xs[0], xs[1], len_out], y)?;
        Ok(self.push(t, Op::MaxPool1d { x, arg }, &[x]))
    }

    /// Affine map over the last axis: `x: [..., n]`, `w: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 || xs.is_empty() {
            return Err(Error::dim(format!("linear expects weight [m, n], got {ws:?}")));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let (rows, d) = split_last(&xs);
        if d != n_in {
            return Err(Error::dim(format!("linear weight expects {n_in} features, input has {d}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::dim(format!("linear bias shape {:?}, expected [{n_out}]", self.shape(b))));
            }
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            n_in,
            n_out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let t = Tensor::new(shape, y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            t,
            Op::Linear {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            },
            &inputs,
        ))
    }

    /// Fully connected layer on `[batch, n]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim(format!("dense expects [batch, n], got {:?}", self.shape(x))));
        }
        self.linear(x, w, Some(b))
    }

    /// Batch normalization of `[batch, ch, time]` per channel.
    ///
    /// With [`NormStats::Batch`] the batch moments are returned so the caller
    /// can update running estimates.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim(format!("batchnorm1d expects rank 3, got {xs:?}")));
        }
        let (batch, ch, len) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::dim(format!("batchnorm1d affine params must be [{ch}]")));
        }
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let n = batch * len;
                if n < 2 {
                    return Err(Error::Numerical(
                        "batch norm in train mode needs more than one value per channel".into(),
                    ));
                }
                let s = kernels::batch_stats(self.value(x).data(), batch, ch, len);
                let corr = T::lit(n as f64 / (n - 1) as f64);
                let unbiased = s.var.iter().map(|&v| v * corr).collect();
                let moments = BatchMoments {
                    mean: s.mean.clone(),
                    var: unbiased,
                };
                (s.mean, s.var, Some(moments))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::dim(format!("running stats must have {ch} entries")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::channel_affine(
            self.value(x).data(),
            batch,
            ch,
            len,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(xs, y)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (batch, ch, len),
                batch_stats: moments.is_some(),
            },
            &[x, gamma, beta],
        );
        Ok((v, moments))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (_, d) = split_last(&xs);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!("layernorm affine params must be [{d}]")));
        }
        let (y, xhat, inv_std) =
            kernels::layernorm_forward(self.value(x).data(), d, self.value(gamma).data(), self.value(beta).data(), eps);
        let t = Tensor::new(xs, y)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn elu(&mut self, x: Var, alpha: T) -> Var {
        let t = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { alpha * (v.exp() - T::one()) });
        self.push(t, Op::Elu { x, alpha }, &[x])
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Eval mode
    /// and `p == 0` return `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (_, d) = split_last(&xs);
        let y = kernels::softmax_rows(self.value(x).data(), d);
        let t = Tensor::new(xs, y)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Scaled dot-product attention `softmax(Q K^T / sqrt(d_k)) V` computed
    /// independently for `heads` column groups of `[batch, seq, d_model]`
    /// inputs; head outputs are concatenated back to `d_model` columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 {
            return Err(Error::dim(format!("attention expects [batch, seq, d_model], got {qs:?}")));
        }
        if self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::dim("attention q, k, v shapes differ"));
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {heads} heads",
                qs[2]
            )));
        }
        let geom = AttnGeom {
            batch: qs[0],
            seq: qs[1],
            d_model: qs[2],
            heads,
        };
        let (y, probs) =
            kernels::attention_forward(&geom, self.value(q).data(), self.value(k).data(), self.value(v).data());
        let t = Tensor::new(qs, y)?;
        Ok(self.push(t, Op::Attention { q, k, v, geom, probs }, &[q, k, v]))
    }

    /// Attention weights `[batch, heads, seq, seq]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { geom, probs, .. } => Tensor::new(
                [geom.batch, geom.heads, geom.seq, geom.seq],
                probs.clone(),
            )
            .ok(),
            _ => None,
        }
    }

    /// Every attention node on the tape, in recording order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Attention { .. }))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Multi-head self-attention: project `x` to Q, K, V, attend per head,
    /// then apply the output projection.
    pub fn multi_head_attention(&mut self, x: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d_model {d} is not divisible by {heads} heads")));
        }
        let q = self.linear(x, p.wq, Some(p.bq))?;
        let k = self.linear(x, p.wk, Some(p.bk))?;
        let v = self.linear(x, p.wv, Some(p.bv))?;
        let a = self.attention(q, k, v, heads)?;
        self.linear(a, p.wo, Some(p.bo))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim(format!("concat shape mismatch: {base:?} vs {s:?}")));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            xs,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let n = xs.len();
        let (rows, cols) = (xs[n - 2], xs[n - 1]);
        let outer = xs[..n - 2].iter().product();
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            let off = o * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    data[off + c * rows + r] = src[off + r * cols + c];
                }
            }
        }
        let mut shape = xs;
        shape.swap(n - 2, n - 1);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Transpose { x, outer, rows, cols }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Adds the first `seq` rows of `pos: [capacity, d]` to every batch item
    /// of `x: [batch, seq, d]`.
    pub fn add_positional(&mut self, x: Var, pos: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ps = self.shape(pos);
        if xs.len() != 3 || ps.len() != 2 || ps[1] != xs[2] {
            return Err(Error::dim(format!("positional table {ps:?} does not fit input {xs:?}")));
        }
        if xs[1] > ps[0] {
            return Err(Error::Config(format!(
                "sequence length {} exceeds positional capacity {}",
                xs[1], ps[0]
            )));
        }
        let span = xs[1] * xs[2];
        let p = &self.value(pos).data()[..span];
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(span) {
            for (a, &b) in chunk.iter_mut().zip(p) {
                *a += b;
            }
        }
        let batch = xs[0];
        let t = Tensor::new(xs, data)?;
        Ok(self.push(t, Op::AddPositional { x, pos, batch, span }, &[x, pos]))
    }

    /// Per-band spatial mixing: `x: [batch, bands, ch, time]` and
    /// `w: [bands, mixed, ch]` give `[batch, bands * mixed, time]` with
    /// `y[b, band * mixed + k, t] = sum_i w[band, k, i] * x[b, band, i, t]`.
    pub fn channel_fusion(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 3 || ws[0] != xs[1] || ws[2] != xs[2] {
            return Err(Error::dim(format!(
                "channel fusion weight {ws:?} does not match input {xs:?}"
            )));
        }
        let (batch, bands, ch, len) = (xs[0], xs[1], xs[2], xs[3]);
        let mixed = ws[1];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut y = vec![T::zero(); batch * bands * mixed * len];
        for b in 0..batch {
            for band in 0..bands {
                for k in 0..mixed {
                    let out = &mut y[((b * bands + band) * mixed + k) * len..][..len];
                    for i in 0..ch {
                        let wk = wv[(band * mixed + k) * ch + i];
                        let xr = &xv[((b * bands + band) * ch + i) * len..][..len];
                        for (o, &xi) in out.iter_mut().zip(xr) {
                            *o += wk * xi;
                        }
                    }
                }
            }
        }
        let t = Tensor::new([batch, bands * mixed, len], y)?;
        Ok(self.push(
            t,
            Op::ChannelFusion {
                x,
                w,
                batch,
                bands,
                ch,
                mixed,
                len,
            },
            &[x, w],
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross entropy expects [batch, classes] logits for {} labels, got {ls:?}",
                labels.len()
            )));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::dim(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), classes);
        let x = self.value(logits).data();
        let mut loss = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &x[r * classes..][..classes];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        loss /= T::lit(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *c).collect());
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![g[0]; val(*a).len()]);
            }
            Op::SumSquares(xs) => {
                let two = T::lit(2.0) * g[0];
                for &x in xs {
                    self.accumulate(grads, x, val(x).iter().map(|&v| two * v).collect());
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv1d_backward(geom, val(*x), val(*w), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool1d { x, arg } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&i, &gv) in arg.iter().zip(g) {
                    dx[i] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            } => {
                let (dx, dw, db) = kernels::linear_backward(val(*x), val(*w), g, *rows, *n_in, *n_out);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (batch, ch, len),
                batch_stats,
            } => {
                let gm = val(*gamma);
                if *batch_stats {
                    let (dx, dg, db) = kernels::normalize_backward_batch(g, xhat, gm, inv_std, *batch, *ch, *len);
                    self.accumulate(grads, *x, dx);
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                } else {
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dg = vec![T::zero(); *ch];
                    let mut db = vec![T::zero(); *ch];
                    for i in 0..g.len() {
                        let c = (i / len) % ch;
                        dx[i] = g[i] * gm[c] * inv_std[c];
                        dg[c] += g[i] * xhat[i];
                        db[c] += g[i];
                    }
                    self.accumulate(grads, *x, dx);
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma);
                let (dx, dg, db) = kernels::layernorm_backward(g, xhat, inv_std, gm, gm.len());
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Elu { x, alpha } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .zip(node.value.data())
                    .map(|((&g, &xi), &yi)| if xi >= T::zero() { g } else { g * (yi + *alpha) })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, *x, kernels::softmax_backward(node.value.data(), g, d));
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(geom, val(*q), val(*k), val(*v), probs, g);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Concat { xs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    let mut dx = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        dx.extend_from_slice(&g[o * row + off..o * row + off + w]);
                    }
                    off += w;
                    self.accumulate(grads, x, dx);
                }
            }
            Op::Transpose { x, outer, rows, cols } => {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..*outer {
                    let off = o * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dx[off + r * cols + c] = g[off + c * rows + r];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::AddPositional { x, pos, batch, span } => {
                self.accumulate(grads, *x, g.to_vec());
                let mut dp = vec![T::zero(); val(*pos).len()];
                for b in 0..*batch {
                    for (d, &gv) in dp[..*span].iter_mut().zip(&g[b * span..(b + 1) * span]) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *pos, dp);
            }
            Op::ChannelFusion {
                x,
                w,
                batch,
                bands,
                ch,
                mixed,
                len,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for b in 0..*batch {
                    for band in 0..*bands {
                        for k in 0..*mixed {
                            let gr = &g[((b * bands + band) * mixed + k) * len..][..*len];
                            for i in 0..*ch {
                                let widx = (band * mixed + k) * ch + i;
                                let xoff = ((b * bands + band) * ch + i) * len;
                                let mut acc = T::zero();
                                for t in 0..*len {
                                    acc += gr[t] * xv[xoff + t];
                                    dx[xoff + t] += wv[widx] * gr[t];
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * classes + l] -= scale;
                }
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests;
