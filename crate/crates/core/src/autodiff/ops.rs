//! Forward rules for every primitive.

use super::{gemm, ConvGeom, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Output shape when one operand's shape is a suffix of the other's.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::shape(op, a, b));
    }
    Ok(long.to_vec())
}

/// Mode of a batch-normalization call.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics and return them for running updates.
    Training,
    /// Normalize with frozen running statistics.
    Inference { mean: &'a [f64], var: &'a [f64] },
}

/// Result of adaptive max pooling over a token axis.
#[derive(Clone, Debug)]
pub struct AdaptivePool {
    pub out: Var,
    /// `[batch × m × d]` source token of every pooled channel value.
    pub channel_argmax: Vec<usize>,
    /// `[batch × m]` token whose contributed channel maxima sum highest in
    /// each window; ties go to the earliest token.
    pub slot_winner: Vec<usize>,
}

/// Half-open window of output slot `i` when pooling `n` tokens to `m`.
pub fn adaptive_window(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = i * n / m;
    let end = ((i + 1) * n).div_ceil(m);
    (start, end)
}

impl Tape {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let n = numel(&shape);
        let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
        let value = Tensor::new(shape, data)?;
        self.push(name, value, op)
    }

    /// Element-wise sum; either operand may be broadcast over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("maximum", self.shape(a), self.shape(b)));
        }
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c))
    }

    /// `[.., n, k] · [k, m]` (shared right operand) or `[.., n, k] · [.., k, m]`
    /// with identical leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, m) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let lead = &ash[..ash.len() - 2];
        let shared_rhs = bsh.len() == 2;
        if kb != k || (!shared_rhs && bsh[..bsh.len() - 2] != *lead) {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let batch: usize = lead.iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * n * m];
        for i in 0..batch {
            let rhs = if shared_rhs {
                bd
            } else {
                &bd[i * k * m..(i + 1) * k * m]
            };
            gemm(
                &ad[i * n * k..(i + 1) * n * k],
                rhs,
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([n, m]);
        let value = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                shared_rhs,
            },
        )
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Backward scatters.
    pub fn gather(&mut self, name: &'static str, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != numel(&shape) {
            return Err(Error::shape(name, &[index.len()], &shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(name, format!("index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(name, value, Op::Gather { src: x, index })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let total = numel(&out_shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..total {
            index.push(counter.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather("permute", x, index, out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Picks `indices` along `axis`.
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("select", &shape, axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::invalid("select", format!("index {bad} out of range {len}")));
        }
        let mut index = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                index.extend((0..inner).map(|j| o * len * inner + i * inner + j));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.gather("select", x, index, out_shape)
    }

    /// Splits `[.., H, W, C]` images into row-major `[.., H/P·W/P, P·P·C]` patch rows.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let index_shape = patchify_index(&shape, patch)?;
        self.gather("patchify", x, index_shape.0, index_shape.1)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut blocks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
            blocks.push(s[axis..].iter().product::<usize>());
        }
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push("gelu", value, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.push("exp", value, Op::Exp(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis("softmax", self.shape(x), axis)?;
        let mut value = self.value(x).clone();
        let d = value.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + j;
                let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    d[at(l)] = (d[at(l)] - max).exp();
                    sum += d[at(l)];
                }
                for l in 0..len {
                    d[at(l)] /= sum;
                }
            }
        }
        self.push("softmax", value, Op::Softmax { x, outer, len, inner })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis("log_softmax", self.shape(x), axis)?;
        let mut value = self.value(x).clone();
        let d = value.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + j;
                let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (d[at(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    d[at(l)] -= lse;
                }
            }
        }
        self.push("log_softmax", value, Op::LogSoftmax { x, outer, len, inner })
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("mean", &shape, axis)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for j in 0..inner {
                    data[o * inner + j] += src[o * len * inner + l * inner + j];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        self.push("mean", value, Op::Mean { x, outer, len, inner })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Normalizes over the last axis, then applies the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [width] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / width;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for i in 0..rows {
            let row = &xv.data()[i * width..(i + 1) * width];
            let mu = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / width as f64;
            rstd[i] = 1.0 / (var + eps).sqrt();
            for c in 0..width {
                xhat[i * width + c] = (row[c] - mu) * rstd[i];
            }
        }
        let value = self.affine(x, gamma, beta, &xhat, width)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                width,
                xhat,
                rstd,
            },
        )
    }

    fn affine(&self, x: Var, gamma: Var, beta: Var, xhat: &[f64], width: usize) -> Result<Tensor> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % width] + b[i % width])
            .collect();
        Tensor::new(self.shape(x).to_vec(), data)
    }

    /// Channels-last batch normalization over every leading axis. In training
    /// mode returns the biased batch mean and variance alongside the output.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let channels = *self.shape(x).last().ok_or_else(|| Error::invalid("batch_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::shape("batch_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let rows = xv.len() / channels;
        let (mean, var, training) = match mode {
            BatchNormMode::Training => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for (i, v) in xv.iter().enumerate() {
                    mean[i % channels] += v;
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for (i, v) in xv.iter().enumerate() {
                    let d = v - mean[i % channels];
                    var[i % channels] += d * d;
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var, true)
            }
            BatchNormMode::Inference { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::shape("batch_norm", &[channels], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % channels]) * rstd[i % channels])
            .collect();
        let value = self.affine(x, gamma, beta, &xhat, channels)?;
        let out = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                xhat,
                rstd,
                training,
            },
        )?;
        Ok((out, training.then_some((mean, var))))
    }

    /// Temporal convolution over `[B, T, J, C_in]` with kernel `[K, C_in, C_out]`.
    /// Each joint is convolved independently along time.
    pub fn conv_temporal(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 3 || ws[1] != xs[3] {
            return Err(Error::shape("conv_temporal", &xs, &ws));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv_temporal", "stride and dilation must be positive"));
        }
        let (batch, t_in, joints, c_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (kernel, c_out) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv_temporal", &ws, self.shape(b)));
            }
        }
        let span = dilation * (kernel - 1) + 1;
        if t_in + 2 * pad < span {
            return Err(Error::invalid(
                "conv_temporal",
                format!("sequence of {t_in} frames shorter than receptive field {span}"),
            ));
        }
        let t_out = (t_in + 2 * pad - span) / stride + 1;
        let geom = ConvGeom {
            batch,
            t_in,
            t_out,
            joints,
            c_in,
            c_out,
            kernel,
            stride,
            dilation,
            pad,
        };
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let in_frame = joints * c_in;
        let out_frame = joints * c_out;
        let mut out = vec![0.0; batch * t_out * out_frame];
        for b in 0..batch {
            for t in 0..t_out {
                let dst = &mut out[(b * t_out + t) * out_frame..][..out_frame];
                if let Some(bias) = bias {
                    let bv = self.value(bias).data();
                    for row in dst.chunks_mut(c_out) {
                        row.copy_from_slice(bv);
                    }
                }
                for k in 0..kernel {
                    if let Some(s) = geom.source(t, k) {
                        let src = &xv[(b * t_in + s) * in_frame..][..in_frame];
                        gemm(src, &wv[k * c_in * c_out..(k + 1) * c_in * c_out], dst, joints, c_in, c_out);
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, t_out, joints, c_out], out)?;
        self.push("conv_temporal", value, Op::Conv { x, w, bias, geom })
    }

    /// Max pooling along the time axis of `[B, T, J, C]`; padded taps are ignored.
    pub fn max_pool_temporal(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("max_pool_temporal", format!("expected rank 4, got {xs:?}")));
        }
        if kernel == 0 || stride == 0 || xs[1] + 2 * pad < kernel {
            return Err(Error::invalid("max_pool_temporal", "window larger than padded sequence"));
        }
        let (batch, t_in, joints, ch) = (xs[0], xs[1], xs[2], xs[3]);
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let frame = joints * ch;
        let src = self.value(x).data();
        let mut index = Vec::with_capacity(batch * t_out * frame);
        for b in 0..batch {
            for t in 0..t_out {
                for e in 0..frame {
                    let mut best: Option<usize> = None;
                    for k in 0..kernel {
                        let pos = (t * stride + k) as isize - pad as isize;
                        if pos < 0 || pos as usize >= t_in {
                            continue;
                        }
                        let i = (b * t_in + pos as usize) * frame + e;
                        if best.is_none_or(|j| src[i] > src[j]) {
                            best = Some(i);
                        }
                    }
                    index.push(best.ok_or_else(|| Error::invalid("max_pool_temporal", "empty window"))?);
                }
            }
        }
        self.gather("max_pool_temporal", x, index, vec![batch, t_out, joints, ch])
    }

    /// Adaptive max pooling of `[B, n, d]` along the token axis to `m` slots.
    /// Slot `i` covers tokens `floor(i·n/m) ..= ceil((i+1)·n/m) − 1`; ties go
    /// to the earliest token.
    pub fn adaptive_max_pool(&mut self, x: Var, m: usize) -> Result<AdaptivePool> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::invalid("adaptive_max_pool", format!("expected rank 3, got {xs:?}")));
        }
        let (batch, n, d) = (xs[0], xs[1], xs[2]);
        if m == 0 || m > n {
            return Err(Error::invalid("adaptive_max_pool", format!("cannot pool {n} tokens to {m}")));
        }
        let src = self.value(x).data();
        let mut channel_argmax = Vec::with_capacity(batch * m * d);
        let mut slot_winner = Vec::with_capacity(batch * m);
        let mut index = Vec::with_capacity(batch * m * d);
        for b in 0..batch {
            let tok = |t: usize| &src[(b * n + t) * d..(b * n + t + 1) * d];
            for i in 0..m {
                let (start, end) = adaptive_window(i, n, m);
                for c in 0..d {
                    let mut best = start;
                    for t in start + 1..end {
                        if tok(t)[c] > tok(best)[c] {
                            best = t;
                        }
                    }
                    channel_argmax.push(best);
                    index.push((b * n + best) * d + c);
                }
                // Each token scores the channel maxima it supplied.
                let picks = &channel_argmax[channel_argmax.len() - d..];
                let mut score = vec![None::<f64>; end - start];
                for (c, &t) in picks.iter().enumerate() {
                    *score[t - start].get_or_insert(0.0) += tok(t)[c];
                }
                let mut winner: Option<(usize, f64)> = None;
                for (t, v) in (start..end).zip(&score) {
                    if let Some(v) = *v {
                        if winner.is_none_or(|(_, w)| v > w) {
                            winner = Some((t, v));
                        }
                    }
                }
                let winner = winner.expect("every window supplies a channel").0;
                slot_winner.push(winner);
            }
        }
        let out = self.gather("adaptive_max_pool", x, index, vec![batch, m, d])?;
        Ok(AdaptivePool {
            out,
            channel_argmax,
            slot_winner,
        })
    }

    /// Scales every vector along the last axis to unit length.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let width = *self.shape(x).last().ok_or_else(|| Error::invalid("l2_normalize", "scalar input"))?;
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.len() / width);
        for (i, row) in xv.data().chunks(width).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::invalid("l2_normalize", format!("zero-norm vector at row {i}")));
            }
            norms.push(n);
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i / width])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, width, norms })
    }
}

/// Gather indices and output shape for [`Tape::patchify`].
pub fn patchify_index(shape: &[usize], patch: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() < 3 {
        return Err(Error::invalid("patchify", format!("expected [.., H, W, C], got {shape:?}")));
    }
    let r = shape.len();
    let (h, w, c) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("image {h}x{w} not divisible by patch size {patch}"),
        ));
    }
    let lead: usize = shape[..r - 3].iter().product();
    let (ph, pw) = (h / patch, w / patch);
    let mut index = Vec::with_capacity(lead * h * w * c);
    for l in 0..lead {
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..patch {
                    for x in 0..patch {
                        let base = ((l * h + py * patch + y) * w + px * patch + x) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    let mut out = shape[..r - 3].to_vec();
    out.extend([ph * pw, patch * patch * c]);
    Ok((index, out))
}
