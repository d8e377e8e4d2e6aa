//! Forward and backward loops for the layer kernels, on flat row-major slices.
//!
//! Reductions always run in a fixed order so repeated calls are bit-identical.

use crate::scalar::Scalar;

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Geometry of a 1-D convolution over `[batch, c_in, len_in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub pad_left: usize,
    pub stride: usize,
}

impl ConvGeom {
    /// Output positions `t` for which tap `k` reads inside the input.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad_left {
            0
        } else {
            (self.pad_left - k).div_ceil(s)
        };
        let reach = self.len_in + self.pad_left;
        let hi = if reach > k {
            ((reach - 1 - k) / s + 1).min(self.len_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn src(&self, t: usize, k: usize) -> usize {
        t * self.stride + k - self.pad_left
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); g.batch * g.c_out * g.len_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let out = &mut y[(b * g.c_out + o) * g.len_out..][..g.len_out];
            if let Some(bias) = bias {
                out.iter_mut().for_each(|v| *v = bias[o]);
            }
            for i in 0..g.c_in {
                let xrow = &x[(b * g.c_in + i) * g.len_in..][..g.len_in];
                let wrow = &w[(o * g.c_in + i) * g.kernel..][..g.kernel];
                for (k, &wk) in wrow.iter().enumerate() {
                    let (lo, hi) = g.valid_range(k);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = g.src(lo, k);
                        axpy(wk, &xrow[start..start + (hi - lo)], &mut out[lo..hi]);
                    } else {
                        for t in lo..hi {
                            out[t] += wk * xrow[g.src(t, k)];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv1d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let gout = &dy[(b * g.c_out + o) * g.len_out..][..g.len_out];
            db[o] += gout.iter().copied().sum::<T>();
            for i in 0..g.c_in {
                let xoff = (b * g.c_in + i) * g.len_in;
                let woff = (o * g.c_in + i) * g.kernel;
                for k in 0..g.kernel {
                    let (lo, hi) = g.valid_range(k);
                    if lo >= hi {
                        continue;
                    }
                    let wk = w[woff + k];
                    if g.stride == 1 {
                        let start = xoff + g.src(lo, k);
                        let n = hi - lo;
                        dw[woff + k] += dot(&gout[lo..hi], &x[start..start + n]);
                        axpy(wk, &gout[lo..hi], &mut dx[start..start + n]);
                    } else {
                        let mut acc = T::zero();
                        for t in lo..hi {
                            let p = xoff + g.src(t, k);
                            acc += gout[t] * x[p];
                            dx[p] += wk * gout[t];
                        }
                        dw[woff + k] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling over the last axis of `rows` independent rows. Returns the
/// pooled values and, per output, the flat index of the selected input.
pub(crate) fn maxpool1d_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    len_in: usize,
    len_out: usize,
    pool: usize,
    stride: usize,
    pad_left: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut y = Vec::with_capacity(rows * len_out);
    let mut arg = Vec::with_capacity(rows * len_out);
    for r in 0..rows {
        let base = r * len_in;
        for t in 0..len_out {
            let start = (t * stride) as isize - pad_left as isize;
            let mut best = T::neg_infinity();
            let mut best_idx = usize::MAX;
            for j in 0..pool as isize {
                let p = start + j;
                if p < 0 || p as usize >= len_in {
                    continue;
                }
                let v = x[base + p as usize];
                if best_idx == usize::MAX || v > best {
                    best = v;
                    best_idx = base + p as usize;
                }
            }
            y.push(best);
            arg.push(best_idx);
        }
    }
    (y, arg)
}

/// `y[r, j] = b[j] + sum_i x[r, i] * w[j, i]`
pub(crate) fn linear_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, rows: usize, n_in: usize, n_out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..][..n_in];
        let yr = &mut y[r * n_out..][..n_out];
        for (j, yj) in yr.iter_mut().enumerate() {
            let b = bias.map_or(T::zero(), |b| b[j]);
            *yj = b + dot(xr, &w[j * n_in..][..n_in]);
        }
    }
    y
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    n_in: usize,
    n_out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * n_in];
    let mut dw = vec![T::zero(); n_out * n_in];
    let mut db = vec![T::zero(); n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..][..n_in];
        let dyr = &dy[r * n_out..][..n_out];
        let dxr = &mut dx[r * n_in..][..n_in];
        for (j, &g) in dyr.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            db[j] += g;
            let wj = &w[j * n_in..][..n_in];
            axpy(g, wj, dxr);
            axpy(g, xr, &mut dw[j * n_in..][..n_in]);
        }
    }
    (dx, dw, db)
}

/// Normalization statistics for batch norm over `(batch, time)` per channel.
pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn batch_stats<T: Scalar>(x: &[T], batch: usize, ch: usize, len: usize) -> BatchStats<T> {
    let n = T::lit((batch * len) as f64);
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    for c in 0..ch {
        let mut s = T::zero();
        for b in 0..batch {
            s += x[(b * ch + c) * len..][..len].iter().copied().sum::<T>();
        }
        let m = s / n;
        let mut v = T::zero();
        for b in 0..batch {
            for &xi in &x[(b * ch + c) * len..][..len] {
                let d = xi - m;
                v += d * d;
            }
        }
        mean[c] = m;
        var[c] = v / n;
    }
    BatchStats { mean, var }
}

/// Applies `(x - mean) * inv_std * gamma + beta` per channel; returns `(y, xhat)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn channel_affine<T: Scalar>(
    x: &[T],
    batch: usize,
    ch: usize,
    len: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * len;
            for t in 0..len {
                let h = (x[off + t] - mean[c]) * inv_std[c];
                xhat[off + t] = h;
                y[off + t] = h * gamma[c] + beta[c];
            }
        }
    }
    (y, xhat)
}

/// Backward of training-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub(crate) fn normalize_backward_batch<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    gamma: &[T],
    inv_std: &[T],
    batch: usize,
    ch: usize,
    len: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::lit((batch * len) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for c in 0..ch {
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for b in 0..batch {
            let off = (b * ch + c) * len;
            for t in 0..len {
                let g = dy[off + t];
                dgamma[c] += g * xhat[off + t];
                dbeta[c] += g;
                let dh = g * gamma[c];
                sum_dh += dh;
                sum_dh_h += dh * xhat[off + t];
            }
        }
        let scale = inv_std[c] / n;
        for b in 0..batch {
            let off = (b * ch + c) * len;
            for t in 0..len {
                let dh = dy[off + t] * gamma[c];
                dx[off + t] = scale * (n * dh - sum_dh - xhat[off + t] * sum_dh_h);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer norm over rows of length `d`; returns `(y, xhat, inv_std per row)`.
pub(crate) fn layernorm_forward<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dn = T::lit(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..][..d];
        let m = xr.iter().copied().sum::<T>() / dn;
        let v = xr.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / dn;
        let is = T::one() / (v + eps).sqrt();
        inv[r] = is;
        for i in 0..d {
            let h = (xr[i] - m) * is;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma[i] + beta[i];
        }
    }
    (y, xhat, inv)
}

pub(crate) fn layernorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv: &[T],
    gamma: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let dn = T::lit(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for r in 0..rows {
        let off = r * d;
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for i in 0..d {
            let g = dy[off + i];
            dgamma[i] += g * xhat[off + i];
            dbeta[i] += g;
            let dh = g * gamma[i];
            sum_dh += dh;
            sum_dh_h += dh * xhat[off + i];
        }
        let scale = inv[r] / dn;
        for i in 0..d {
            let dh = dy[off + i] * gamma[i];
            dx[off + i] = scale * (dn * dh - sum_dh - xhat[off + i] * sum_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Numerically stabilized softmax over consecutive rows of length `d`.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        softmax_into(xr, yr);
    }
    y
}

#[inline]
pub(crate) fn softmax_into<T: Scalar>(x: &[T], y: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (yi, &xi) in y.iter_mut().zip(x) {
        let e = (xi - m).exp();
        *yi = e;
        s += e;
    }
    let inv = T::one() / s;
    y.iter_mut().for_each(|v| *v *= inv);
}

/// `dx = y * (dy - sum(dy * y))` per row.
pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let s = dot(yr, gr);
        for i in 0..d {
            dr[i] = yr[i] * (gr[i] - s);
        }
    }
    dx
}

/// Attention geometry: `q, k, v` are `[batch, seq, d_model]`, split into
/// `heads` contiguous column groups of width `d_model / heads`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub seq: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn dk(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Copies head `h` of `x[batch b]` into `out` as `[dk, seq]`.
fn head_cols<T: Scalar>(g: &AttnGeom, x: &[T], b: usize, h: usize, out: &mut [T]) {
    let (n, d, dk) = (g.seq, g.d_model, g.dk());
    let base = b * n * d + h * dk;
    for j in 0..n {
        for c in 0..dk {
            out[c * n + j] = x[base + j * d + c];
        }
    }
}

/// Adds `src: [dk, seq]` into head `h` of `x[batch b]`.
fn add_head_cols<T: Scalar>(g: &AttnGeom, src: &[T], b: usize, h: usize, x: &mut [T]) {
    let (n, d, dk) = (g.seq, g.d_model, g.dk());
    let base = b * n * d + h * dk;
    for j in 0..n {
        for c in 0..dk {
            x[base + j * d + c] += src[c * n + j];
        }
    }
}

/// Returns the concatenated head outputs `[batch, seq, d_model]` and the
/// attention weights `[batch, heads, seq, seq]`.
pub(crate) fn attention_forward<T: Scalar>(g: &AttnGeom, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let (n, d, dk) = (g.seq, g.d_model, g.dk());
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let mut out = vec![T::zero(); g.batch * n * d];
    let mut probs = vec![T::zero(); g.batch * g.heads * n * n];
    let mut scores = vec![T::zero(); n];
    let mut kt = vec![T::zero(); dk * n];
    let mut vt = vec![T::zero(); dk * n];
    for b in 0..g.batch {
        let base = b * n * d;
        for h in 0..g.heads {
            let col = h * dk;
            let pbase = ((b * g.heads) + h) * n * n;
            head_cols(g, k, b, h, &mut kt);
            head_cols(g, v, b, h, &mut vt);
            for i in 0..n {
                let qi = &q[base + i * d + col..][..dk];
                scores.iter_mut().for_each(|s| *s = T::zero());
                for (c, &qc) in qi.iter().enumerate() {
                    axpy(qc * scale, &kt[c * n..][..n], &mut scores);
                }
                let prow = &mut probs[pbase + i * n..][..n];
                softmax_into(&scores, prow);
                let orow = &mut out[base + i * d + col..][..dk];
                for (c, o) in orow.iter_mut().enumerate() {
                    *o = dot(prow, &vt[c * n..][..n]);
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn attention_backward<T: Scalar>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, d, dk) = (g.seq, g.d_model, g.dk());
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dkk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); n];
    let mut kt = vec![T::zero(); dk * n];
    let mut vt = vec![T::zero(); dk * n];
    let mut dkt = vec![T::zero(); dk * n];
    let mut dvt = vec![T::zero(); dk * n];
    for b in 0..g.batch {
        let base = b * n * d;
        for h in 0..g.heads {
            let col = h * dk;
            let pbase = ((b * g.heads) + h) * n * n;
            head_cols(g, k, b, h, &mut kt);
            head_cols(g, v, b, h, &mut vt);
            dkt.iter_mut().for_each(|x| *x = T::zero());
            dvt.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..n {
                let prow = &probs[pbase + i * n..][..n];
                let go = &dout[base + i * d + col..][..dk];
                // dP[i, :] = V dO[i];  dV[:, c] += P[i, :] dO[i, c]
                dp.iter_mut().for_each(|x| *x = T::zero());
                for (c, &gc) in go.iter().enumerate() {
                    axpy(gc, &vt[c * n..][..n], &mut dp);
                    axpy(gc, prow, &mut dvt[c * n..][..n]);
                }
                let s = dot(prow, &dp);
                // dS = P * (dP - s), folded into dp
                for (x, &p) in dp.iter_mut().zip(prow) {
                    *x = p * (*x - s) * scale;
                }
                let qi = base + i * d + col;
                for c in 0..dk {
                    dq[qi + c] += dot(&dp, &kt[c * n..][..n]);
                    axpy(q[qi + c], &dp, &mut dkt[c * n..][..n]);
                }
            }
            add_head_cols(g, &dkt, b, h, &mut dkk);
            add_head_cols(g, &dvt, b, h, &mut dv);
        }
    }
    (dq, dkk, dv)
}
