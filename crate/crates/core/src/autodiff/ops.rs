//! Differentiable primitives. Each records its forward value and backward rule.

use std::rc::Rc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{col2im, gemm, im2col, ConvGeom};

/// Batch-norm behaviour: batch statistics (and running-stat update) or
/// frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Result of [`Var::batch_hard_triplet`].
#[derive(Clone, Copy, Debug)]
pub struct TripletOutput<'t> {
    pub loss: Var<'t>,
    /// Anchors with at least one positive and one negative in the batch.
    pub valid_anchors: usize,
}

impl TripletOutput<'_> {
    /// Set when no anchor was valid and the loss defaulted to zero.
    pub fn degenerate(&self) -> bool {
        self.valid_anchors == 0
    }
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::dim(op, &sa, &sb));
    }
    Ok(sa)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn around_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len().max(1) {
        return Err(Error::pre(op, format!("axis {axis} invalid for shape {shape:?}")));
    }
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Interprets a rank-3 `[D,H,W]` or rank-4 `[B,D,H,W]` map as (B, D, H*W).
fn map_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [d, h, w] => Ok((1, d, h * w)),
        [b, d, h, w] => Ok((b, d, h * w)),
        _ => Err(Error::pre(op, format!("expected [D,H,W] or [B,D,H,W], got {shape:?}"))),
    }
}

fn ew_binary<'t>(
    op: &'static str,
    a: Var<'t>,
    b: Var<'t>,
    f: impl Fn(f64, f64) -> f64,
    backward: super::BackwardFn,
) -> Result<Var<'t>> {
    let shape = same_shape(op, &a, &b)?;
    let (da, db) = (a.data(), b.data());
    let out = da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect();
    Ok(a.tape.push(op, shape, out, &[a, b], backward))
}

impl<'t> Var<'t> {
    fn tape_ptr(&self) -> &'t Tape {
        self.tape
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        ew_binary(
            "add",
            self,
            other,
            |x, y| x + y,
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        ew_binary(
            "sub",
            self,
            other,
            |x, y| x - y,
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.data(), other.data());
        ew_binary(
            "mul",
            self,
            other,
            |x, y| x * y,
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
                    need[1].then(|| g.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
                ]
            }),
        )
    }

    /// Elementwise product with a constant array (no gradient to `mask`).
    pub fn mul_const(self, mask: &[f64]) -> Result<Var<'t>> {
        if mask.len() != self.numel() {
            return Err(Error::dim("mul_const", &self.shape(), &[mask.len()]));
        }
        let mask: Rc<Vec<f64>> = Rc::new(mask.to_vec());
        let out = self.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let m2 = Rc::clone(&mask);
        Ok(self.tape.push(
            "mul_const",
            self.shape(),
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.iter().zip(m2.iter()).map(|(g, m)| g * m).collect())]),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.data().iter().map(|x| x * c).collect();
        self.tape.push(
            "scale",
            self.shape(),
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.data().iter().map(|x| x + c).collect();
        self.tape.push(
            "add_scalar",
            self.shape(),
            out,
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.data();
        let out = x.iter().map(|&v| v.max(0.0)).collect();
        self.tape.push(
            "relu",
            self.shape(),
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(self) -> Var<'t> {
        let n = self.numel();
        let s = self.data().iter().sum();
        self.tape.push(
            "sum",
            vec![],
            vec![s],
            &[self],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim("reshape", &self.shape(), shape));
        }
        let data = self.data().as_ref().clone();
        Ok(self.tape.push(
            "reshape",
            shape.to_vec(),
            data,
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut out, false);
        Ok(self.tape.push(
            "matmul",
            vec![m, n],
            out,
            &[self, other],
            Box::new(move |g, need| {
                let da = need[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b, true, &mut da, false);
                    da
                });
                let db = need[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &a, true, g, false, &mut db, false);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (b, r, c) = match *shape.as_slice() {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(Error::pre("transpose", format!("rank {} unsupported", shape.len()))),
        };
        let swap = move |src: &[f64], rows: usize, cols: usize| {
            let mut dst = vec![0.0; src.len()];
            for bi in 0..b {
                let s = &src[bi * rows * cols..(bi + 1) * rows * cols];
                let d = &mut dst[bi * rows * cols..(bi + 1) * rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        d[j * rows + i] = s[i * cols + j];
                    }
                }
            }
            dst
        };
        let out = swap(&self.data(), r, c);
        let mut new_shape = shape.clone();
        let k = new_shape.len();
        new_shape.swap(k - 1, k - 2);
        Ok(self.tape.push(
            "transpose",
            new_shape,
            out,
            &[self],
            Box::new(move |g, _| vec![Some(swap(g, c, r))]),
        ))
    }

    /// Direct 2-d cross-correlation of `[C,H,W]` or `[B,C,H,W]` input with a
    /// `[C_out,C,kh,kw]` kernel.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let xs = self.shape();
        let ks = kernel.shape();
        let (batch, c_in, h, w) = match *xs.as_slice() {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::dim("conv2d", &xs, &ks)),
        };
        let (c_out, kh, kw) = match *ks.as_slice() {
            [o, c, kh, kw] if c == c_in => (o, kh, kw),
            _ => return Err(Error::dim("conv2d", &xs, &ks)),
        };
        if stride == 0 {
            return Err(Error::pre("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let x = self.data();
        let kd = kernel.data();
        let mut cols = vec![0.0; batch * rows * ncol];
        let mut out = vec![0.0; batch * c_out * ncol];
        let img = c_in * h * w;
        for b in 0..batch {
            let col = &mut cols[b * rows * ncol..(b + 1) * rows * ncol];
            im2col(&x[b * img..(b + 1) * img], &geom, col);
            let o = &mut out[b * c_out * ncol..(b + 1) * c_out * ncol];
            gemm(c_out, rows, ncol, &kd, false, col, false, o, false);
        }
        let mut out_shape = vec![c_out, geom.h_out, geom.w_out];
        if xs.len() == 4 {
            out_shape.insert(0, batch);
        }
        let cols = Rc::new(cols);
        Ok(self.tape.push(
            "conv2d",
            out_shape,
            out,
            &[self, kernel],
            Box::new(move |g, need| {
                let mut dx = need[0].then(|| vec![0.0; batch * img]);
                let mut dk = need[1].then(|| vec![0.0; c_out * rows]);
                let mut dcol = vec![0.0; rows * ncol];
                for b in 0..batch {
                    let gb = &g[b * c_out * ncol..(b + 1) * c_out * ncol];
                    if let Some(dk) = dk.as_mut() {
                        let col = &cols[b * rows * ncol..(b + 1) * rows * ncol];
                        gemm(c_out, ncol, rows, gb, false, col, true, dk, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, c_out, ncol, &kd, true, gb, false, &mut dcol, false);
                        col2im(&dcol, &geom, &mut dx[b * img..(b + 1) * img]);
                    }
                }
                vec![dx, dk]
            }),
        ))
    }

    /// Per-channel batch normalisation of a `[B,C,...]` tensor.
    ///
    /// Train mode normalises with the biased batch variance and folds the
    /// batch statistics (unbiased variance) into `stats`.
    pub fn batchnorm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: &mut BatchNormStats,
        mode: BnMode,
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::pre(
                "batchnorm",
                format!("expected [B,C,...], got {shape:?}"),
            ));
        }
        let (batch, ch) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if gamma.shape() != [ch] || beta.shape() != [ch] {
            return Err(Error::dim("batchnorm", &shape, &gamma.shape()));
        }
        if stats.mean.len() != ch || stats.var.len() != ch {
            return Err(Error::dim("batchnorm", &shape, &[stats.mean.len()]));
        }
        let n = batch * spatial;
        if mode == BnMode::Train && n == 0 {
            return Err(Error::pre("batchnorm", "train mode needs a non-empty batch"));
        }
        let x = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let idx = move |b: usize, c: usize, s: usize| (b * ch + c) * spatial + s;

        let mut mean = vec![0.0; ch];
        let mut inv_std = vec![0.0; ch];
        match mode {
            BnMode::Train => {
                for c in 0..ch {
                    let mut sum = 0.0;
                    for b in 0..batch {
                        for s in 0..spatial {
                            sum += x[idx(b, c, s)];
                        }
                    }
                    let mu = sum / n as f64;
                    let mut sq = 0.0;
                    for b in 0..batch {
                        for s in 0..spatial {
                            let d = x[idx(b, c, s)] - mu;
                            sq += d * d;
                        }
                    }
                    let var = sq / n as f64;
                    mean[c] = mu;
                    inv_std[c] = 1.0 / (var + stats.eps).sqrt();
                    let unbiased = if n > 1 { sq / (n - 1) as f64 } else { var };
                    let m = stats.momentum;
                    stats.mean[c] = (1.0 - m) * stats.mean[c] + m * mu;
                    stats.var[c] = (1.0 - m) * stats.var[c] + m * unbiased;
                }
            }
            BnMode::Eval => {
                for c in 0..ch {
                    mean[c] = stats.mean[c];
                    inv_std[c] = 1.0 / (stats.var[c] + stats.eps).sqrt();
                }
            }
        }

        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for c in 0..ch {
                for s in 0..spatial {
                    let i = idx(b, c, s);
                    xhat[i] = (x[i] - mean[c]) * inv_std[c];
                    out[i] = gd[c] * xhat[i] + bd[c];
                }
            }
        }
        Ok(self.tape.push(
            "batchnorm",
            shape,
            out,
            &[self, gamma, beta],
            Box::new(move |g, need| {
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        for s in 0..spatial {
                            let i = idx(b, c, s);
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for c in 0..ch {
                        let k = gd[c] * inv_std[c];
                        match mode {
                            BnMode::Eval => {
                                for b in 0..batch {
                                    for s in 0..spatial {
                                        let i = idx(b, c, s);
                                        dx[i] = g[i] * k;
                                    }
                                }
                            }
                            BnMode::Train => {
                                let nf = n as f64;
                                // sum(dxhat) = gamma*sum(g), sum(dxhat*xhat) = gamma*dgamma
                                for b in 0..batch {
                                    for s in 0..spatial {
                                        let i = idx(b, c, s);
                                        dx[i] = k / nf
                                            * (nf * g[i] - dbeta[c] - xhat[i] * dgamma[c]);
                                    }
                                }
                            }
                        }
                    }
                    dx
                });
                vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, len, inner) = around_axis("softmax", &shape, axis)?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[at(k)] /= z;
                }
            }
        }
        let yc = Rc::new(y.clone());
        Ok(self.tape.push(
            "softmax",
            shape,
            y,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * yc[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = yc[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Softmax over the last axis restricted to entries where `keep` is set;
    /// excluded entries are exactly zero. Every row must keep one entry.
    pub fn masked_softmax(self, keep: &[bool]) -> Result<Var<'t>> {
        let shape = self.shape();
        if keep.len() != self.numel() || shape.is_empty() {
            return Err(Error::dim("masked_softmax", &shape, &[keep.len()]));
        }
        let len = *shape.last().unwrap();
        let rows = self.numel() / len;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let span = r * len..(r + 1) * len;
            let max = span
                .clone()
                .filter(|&i| keep[i])
                .map(|i| x[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::pre("masked_softmax", format!("row {r} keeps no entry")));
            }
            let mut z = 0.0;
            for i in span.clone().filter(|&i| keep[i]) {
                y[i] = (x[i] - max).exp();
                z += y[i];
            }
            for i in span {
                y[i] /= z;
            }
        }
        let yc = Rc::new(y.clone());
        Ok(self.tape.push(
            "masked_softmax",
            shape,
            y,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let span = r * len..(r + 1) * len;
                    let dot: f64 = span.clone().map(|i| g[i] * yc[i]).sum();
                    for i in span {
                        dx[i] = yc[i] * (g[i] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean over spatial positions: `[C,H,W] -> [C]`, `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (b, c, s) = map_dims("global_avg_pool", &shape)?;
        let x = self.data();
        let out: Vec<f64> = x.chunks(s).map(|p| p.iter().sum::<f64>() / s as f64).collect();
        let out_shape = if shape.len() == 3 { vec![c] } else { vec![b, c] };
        Ok(self.tape.push(
            "global_avg_pool",
            out_shape,
            out,
            &[self],
            Box::new(move |g, _| {
                let inv = 1.0 / s as f64;
                vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, s)).collect())]
            }),
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, len, inner) = around_axis("mean_axis", &shape, axis)?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|k| x[(o * len + k) * inner + i]).sum();
                out[o * inner + i] = s / len as f64;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.tape.push(
            "mean_axis",
            out_shape,
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Divides each row of `[n,d]` (or the single row of `[d]`) by
    /// `max(norm, eps)`.
    pub fn l2_normalize_rows(self, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let d = match *shape.as_slice() {
            [d] | [_, d] => d,
            _ => return Err(Error::pre("l2_normalize_rows", format!("rank {}", shape.len()))),
        };
        let x = self.data();
        let norms: Vec<f64> = x
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
            .collect();
        let y: Vec<f64> = x
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, &n)| r.iter().map(move |v| v / n))
            .collect();
        let yc = Rc::new(y.clone());
        Ok(self.tape.push(
            "l2_normalize_rows",
            shape,
            y,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    if n > eps {
                        let dot: f64 = span.clone().map(|i| g[i] * yc[i]).sum();
                        for i in span {
                            dx[i] = (g[i] - yc[i] * dot) / n;
                        }
                    } else {
                        for i in span {
                            dx[i] = g[i] / n;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Dot product of every local descriptor with a per-sample vector:
    /// `[B,D,H,W] x [B,D] -> [B,H,W]` (or unbatched `[D,H,W] x [D] -> [H,W]`).
    pub fn channel_contract(self, probe: Var<'t>) -> Result<Var<'t>> {
        let fs = self.shape();
        let ps = probe.shape();
        let (b, d, s) = map_dims("channel_contract", &fs)?;
        let expected: Vec<usize> = if fs.len() == 3 { vec![d] } else { vec![b, d] };
        if ps != expected {
            return Err(Error::dim("channel_contract", &fs, &ps));
        }
        let (f, p) = (self.data(), probe.data());
        let mut out = vec![0.0; b * s];
        for bi in 0..b {
            for di in 0..d {
                let pv = p[bi * d + di];
                let plane = &f[(bi * d + di) * s..(bi * d + di + 1) * s];
                for (o, v) in out[bi * s..(bi + 1) * s].iter_mut().zip(plane) {
                    *o += v * pv;
                }
            }
        }
        let out_shape = fs[fs.len() - 2..].to_vec();
        let out_shape = if fs.len() == 3 { out_shape } else { [vec![b], out_shape].concat() };
        Ok(self.tape.push(
            "channel_contract",
            out_shape,
            out,
            &[self, probe],
            Box::new(move |g, need| {
                let df = need[0].then(|| {
                    let mut df = vec![0.0; b * d * s];
                    for bi in 0..b {
                        for di in 0..d {
                            let pv = p[bi * d + di];
                            let dst = &mut df[(bi * d + di) * s..(bi * d + di + 1) * s];
                            for (o, gv) in dst.iter_mut().zip(&g[bi * s..(bi + 1) * s]) {
                                *o = gv * pv;
                            }
                        }
                    }
                    df
                });
                let dp = need[1].then(|| {
                    let mut dp = vec![0.0; b * d];
                    for bi in 0..b {
                        for di in 0..d {
                            let plane = &f[(bi * d + di) * s..(bi * d + di + 1) * s];
                            dp[bi * d + di] =
                                plane.iter().zip(&g[bi * s..(bi + 1) * s]).map(|(a, b)| a * b).sum();
                        }
                    }
                    dp
                });
                vec![df, dp]
            }),
        ))
    }

    /// `out[b,d,i,j] = (scale * gate[b,i,j]) * map[b,d,i,j]`.
    pub fn spatial_gate(self, gate: Var<'t>, scale: f64) -> Result<Var<'t>> {
        let fs = self.shape();
        let gs = gate.shape();
        let (b, d, s) = map_dims("spatial_gate", &fs)?;
        let expected: Vec<usize> = if fs.len() == 3 {
            fs[1..].to_vec()
        } else {
            vec![b, fs[2], fs[3]]
        };
        if gs != expected {
            return Err(Error::dim("spatial_gate", &fs, &gs));
        }
        let (f, gt) = (self.data(), gate.data());
        let mut out = vec![0.0; f.len()];
        for bi in 0..b {
            for di in 0..d {
                let base = (bi * d + di) * s;
                for k in 0..s {
                    out[base + k] = (scale * gt[bi * s + k]) * f[base + k];
                }
            }
        }
        Ok(self.tape.push(
            "spatial_gate",
            fs,
            out,
            &[self, gate],
            Box::new(move |g, need| {
                let df = need[0].then(|| {
                    let mut df = vec![0.0; g.len()];
                    for bi in 0..b {
                        for di in 0..d {
                            let base = (bi * d + di) * s;
                            for k in 0..s {
                                df[base + k] = (scale * gt[bi * s + k]) * g[base + k];
                            }
                        }
                    }
                    df
                });
                let dg = need[1].then(|| {
                    let mut dg = vec![0.0; b * s];
                    for bi in 0..b {
                        for di in 0..d {
                            let base = (bi * d + di) * s;
                            for k in 0..s {
                                dg[bi * s + k] += scale * g[base + k] * f[base + k];
                            }
                        }
                    }
                    dg
                });
                vec![df, dg]
            }),
        ))
    }

    /// Adds a per-channel vector at every spatial position:
    /// `[B,D,H,W] + [B,D]` (or `[D,H,W] + [D]`).
    pub fn add_spatial(self, v: Var<'t>) -> Result<Var<'t>> {
        let fs = self.shape();
        let vs = v.shape();
        let (b, d, s) = map_dims("add_spatial", &fs)?;
        let expected: Vec<usize> = if fs.len() == 3 { vec![d] } else { vec![b, d] };
        if vs != expected {
            return Err(Error::dim("add_spatial", &fs, &vs));
        }
        let (f, vd) = (self.data(), v.data());
        let out: Vec<f64> = f.iter().enumerate().map(|(i, x)| x + vd[i / s]).collect();
        Ok(self.tape.push(
            "add_spatial",
            fs,
            out,
            &[self, v],
            Box::new(move |g, need| {
                let dv = need[1].then(|| g.chunks(s).map(|c| c.iter().sum()).collect());
                vec![need[0].then(|| g.to_vec()), dv]
            }),
        ))
    }

    /// Adds `bias[j]` to column `j` of an `[n,m]` matrix.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let xs = self.shape();
        let bs = bias.shape();
        let m = match (xs.as_slice(), bs.as_slice()) {
            (&[_, m], &[m2]) if m == m2 => m,
            _ => return Err(Error::dim("add_row_bias", &xs, &bs)),
        };
        let (x, bd) = (self.data(), bias.data());
        let out = x.iter().enumerate().map(|(i, v)| v + bd[i % m]).collect();
        Ok(self.tape.push(
            "add_row_bias",
            xs,
            out,
            &[self, bias],
            Box::new(move |g, need| {
                let db = need[1].then(|| {
                    let mut db = vec![0.0; m];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % m] += gv;
                    }
                    db
                });
                vec![need[0].then(|| g.to_vec()), db]
            }),
        ))
    }

    /// Gathers slices along the first axis; indices may repeat.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.is_empty() || indices.is_empty() {
            return Err(Error::pre("index_select", "needs rank >= 1 and >= 1 index"));
        }
        let n0 = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n0) {
            return Err(Error::pre("index_select", format!("index {bad} out of range {n0}")));
        }
        let inner: usize = shape[1..].iter().product();
        let x = self.data();
        let out: Vec<f64> = indices
            .iter()
            .flat_map(|&i| x[i * inner..(i + 1) * inner].iter().copied())
            .collect();
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        Ok(self.tape.push(
            "index_select",
            out_shape,
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n0 * inner];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, s) in dx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                    {
                        *d += s;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::pre("concat", "no inputs"))?;
        let tape = first.tape_ptr();
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::pre("concat", format!("axis {axis} invalid for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, &s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (p, &len) in parts.iter().zip(&lens) {
            let d = p.data();
            for o in 0..outer {
                let src = &d[o * len * inner..(o + 1) * len * inner];
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        Ok(tape.push(
            "concat",
            out_shape,
            out,
            parts,
            Box::new(move |g, need| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for (&len, &nd) in lens.iter().zip(need) {
                    grads.push(nd.then(|| {
                        let mut d = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&g[src..src + len * inner]);
                        }
                        d
                    }));
                    offset += len;
                }
                grads
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[n,C]` logits against class indices.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (n, c) = match *shape.as_slice() {
            [n, c] => (n, c),
            _ => return Err(Error::pre("cross_entropy", format!("expected [n,C], got {shape:?}"))),
        };
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::pre("cross_entropy", format!("label {bad} out of range {c}")));
        }
        let x = self.data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[labels[r]];
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
        }
        let labels = labels.to_vec();
        Ok(self.tape.push(
            "cross_entropy",
            vec![],
            vec![loss / n as f64],
            &[self],
            Box::new(move |g, _| {
                let s = g[0] / n as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= s;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Batch-hard triplet loss on the rows of `[n,e]` embeddings using
    /// Euclidean distance `sqrt(max(|a-b|^2, 1e-12))`.
    ///
    /// For each anchor with a positive and a negative in the batch, takes
    /// the farthest positive and nearest negative (first index on ties),
    /// hinges `d_ap - d_an + margin` at zero and averages over those anchors.
    pub fn batch_hard_triplet(self, labels: &[usize], margin: f64) -> Result<TripletOutput<'t>> {
        let shape = self.shape();
        let (n, e) = match *shape.as_slice() {
            [n, e] => (n, e),
            _ => return Err(Error::pre("batch_hard_triplet", format!("expected [n,e], got {shape:?}"))),
        };
        if labels.len() != n {
            return Err(Error::dim("batch_hard_triplet", &shape, &[labels.len()]));
        }
        let x = self.data();
        let row = |i: usize| &x[i * e..(i + 1) * e];
        let mut dist = vec![0.0; n * n];
        let mut clamped = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let sq: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                clamped[i * n + j] = sq < 1e-12;
                dist[i * n + j] = sq.max(1e-12).sqrt();
            }
        }
        // (anchor, hardest positive, hardest negative) for active hinges
        let mut active: Vec<(usize, usize, usize)> = Vec::new();
        let mut total = 0.0;
        let mut valid = 0;
        for a in 0..n {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| d > dist[a * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| d < dist[a * n + q]) {
                    neg = Some(j);
                }
            }
            let (Some(p), Some(q)) = (pos, neg) else { continue };
            valid += 1;
            let h = dist[a * n + p] - dist[a * n + q] + margin;
            if h > 0.0 {
                total += h;
                active.push((a, p, q));
            }
        }
        let loss = if valid > 0 { total / valid as f64 } else { 0.0 };
        let out = self.tape.push(
            "batch_hard_triplet",
            vec![],
            vec![loss],
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n * e];
                if valid == 0 {
                    return vec![Some(dx)];
                }
                let s = g[0] / valid as f64;
                let mut pull = |i: usize, j: usize, sign: f64| {
                    if clamped[i * n + j] {
                        return;
                    }
                    let d = dist[i * n + j];
                    for k in 0..e {
                        let u = sign * s * (x[i * e + k] - x[j * e + k]) / d;
                        dx[i * e + k] += u;
                        dx[j * e + k] -= u;
                    }
                };
                for &(a, p, q) in &active {
                    pull(a, p, 1.0);
                    pull(a, q, -1.0);
                }
                vec![Some(dx)]
            }),
        );
        Ok(TripletOutput {
            loss: out,
            valid_anchors: valid,
        })
    }
}
