//! Primitive layers: forward and backward passes.
//!
//! Batch items are processed independently (and in parallel) wherever the
//! math allows; any cross-sample reduction is summed in batch order so the
//! result does not depend on the thread schedule.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Static description of a 2-D convolution. Weights are laid out
/// `[out_c, in_c, kernel, kernel]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// "Same" padding (`kernel / 2`) before striding.
    pub fn same(in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        Self { in_c, out_c, kernel, stride, pad: kernel / 2 }
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = pooled_extent(h, self.kernel, self.stride, self.pad)?;
        let wo = pooled_extent(w, self.kernel, self.stride, self.pad)?;
        Ok((ho, wo))
    }
}

/// `floor((in + 2 pad - k) / stride) + 1`, or an error when the window does not fit.
pub fn pooled_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Shape("kernel and stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!("kernel {kernel} larger than padded extent {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, g: &ConvGeometry, ho: usize, wo: usize, cols: &mut [T]) {
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..g.in_c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane_out..][..plane_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, g: &ConvGeometry, ho: usize, wo: usize, dx: &mut [T]) {
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..g.in_c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane_out..][..plane_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

fn check_conv(x: &Tensor4<impl Scalar>, weight_len: usize, g: &ConvGeometry) -> Result<()> {
    if x.c != g.in_c {
        return Err(Error::Shape(format!("conv expects {} input channels, got {}", g.in_c, x.c)));
    }
    if weight_len != g.weight_len() {
        return Err(Error::Shape(format!("conv weight has {weight_len} elements, expected {}", g.weight_len())));
    }
    Ok(())
}

/// Direct cross-correlation via im2col + GEMM.
pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, weight: &[T], g: &ConvGeometry) -> Result<Tensor4<T>> {
    check_conv(x, weight.len(), g)?;
    let (ho, wo) = g.out_size(x.h, x.w)?;
    let ckk = g.in_c * g.kernel * g.kernel;
    let mut out = Tensor4::zeros(x.n, g.out_c, ho, wo);
    let out_len = out.sample_len();
    out.data
        .par_chunks_mut(out_len.max(1))
        .zip(x.data.par_chunks(x.sample_len().max(1)))
        .for_each(|(o, xs)| {
            if is_pointwise(g) {
                T::gemm(g.out_c, ckk, ho * wo, weight, false, xs, false, o, false);
            } else {
                let mut cols = vec![T::zero(); ckk * ho * wo];
                im2col(xs, x.h, x.w, g, ho, wo, &mut cols);
                T::gemm(g.out_c, ckk, ho * wo, weight, false, &cols, false, o, false);
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input and weights.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    g: &ConvGeometry,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>)> {
    check_conv(x, weight.len(), g)?;
    let (ho, wo) = g.out_size(x.h, x.w)?;
    if dy.shape() != [x.n, g.out_c, ho, wo] {
        return Err(Error::Shape(format!(
            "conv upstream gradient {:?} does not match output {:?}",
            dy.shape(),
            [x.n, g.out_c, ho, wo]
        )));
    }
    let ckk = g.in_c * g.kernel * g.kernel;
    let plane_out = ho * wo;
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let per_sample_dw: Vec<Vec<T>> = dx
        .data
        .par_chunks_mut(x.sample_len().max(1))
        .zip(x.data.par_chunks(x.sample_len().max(1)))
        .zip(dy.data.par_chunks(dy.sample_len().max(1)))
        .map(|((dxs, xs), dys)| {
            let mut dw = vec![T::zero(); weight.len()];
            if is_pointwise(g) {
                T::gemm(g.out_c, plane_out, ckk, dys, false, xs, true, &mut dw, false);
                T::gemm(ckk, g.out_c, plane_out, weight, true, dys, false, dxs, false);
            } else {
                let mut cols = vec![T::zero(); ckk * plane_out];
                im2col(xs, x.h, x.w, g, ho, wo, &mut cols);
                T::gemm(g.out_c, plane_out, ckk, dys, false, &cols, true, &mut dw, false);
                T::gemm(ckk, g.out_c, plane_out, weight, true, dys, false, &mut cols, false);
                col2im(&cols, x.h, x.w, g, ho, wo, dxs);
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); weight.len()];
    for part in &per_sample_dw {
        for (a, b) in dw.iter_mut().zip(part) {
            *a += *b;
        }
    }
    Ok((dx, dw))
}

/// Values saved by a training-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<f64>,
}

fn check_bn(x: &Tensor4<impl Scalar>, gamma_len: usize, beta_len: usize) -> Result<()> {
    if gamma_len != x.c || beta_len != x.c {
        return Err(Error::Shape(format!(
            "batch norm over {} channels given gamma/beta of length {gamma_len}/{beta_len}",
            x.c
        )));
    }
    Ok(())
}

/// Normalise each channel by its statistics over `(n, h, w)`.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    check_bn(x, gamma.len(), beta.len())?;
    let plane = x.plane();
    let count = (x.n * plane) as f64;
    let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut xhat = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.c);
    let mut batch_mean = Vec::with_capacity(x.c);
    let mut batch_var_unbiased = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let offsets = (0..x.n).map(|n| (n * x.c + c) * plane);
        let mut sum = 0.0f64;
        for o in offsets.clone() {
            sum += x.data[o..o + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for o in offsets.clone() {
            sq += x.data[o..o + plane].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        let var = sq / count;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma[c], beta[c]);
        let istd_t = T::from_f64_lossy(istd);
        let mean_t = T::from_f64_lossy(mean);
        for o in offsets {
            for i in o..o + plane {
                let xh = (x.data[i] - mean_t) * istd_t;
                xhat.data[i] = xh;
                y.data[i] = g * xh + b;
            }
        }
        inv_std.push(istd_t);
        batch_mean.push(mean);
        batch_var_unbiased.push(if count > 1.0 { sq / (count - 1.0) } else { var });
    }
    Ok((y, BatchNormCache { xhat, inv_std, batch_mean, batch_var_unbiased }))
}

/// Normalise with running estimates.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor4<T>> {
    check_bn(x, gamma.len(), beta.len())?;
    check_bn(x, running_mean.len(), running_var.len())?;
    let plane = x.plane();
    let mut y = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            let istd = T::from_f64_lossy(1.0 / (running_var[c].as_f64() + eps).sqrt());
            let scale = gamma[c] * istd;
            let shift = beta[c] - running_mean[c] * scale;
            let o = (n * x.c + c) * plane;
            for v in &mut y.data[o..o + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    cache: &BatchNormCache<T>,
    momentum: f64,
) {
    for c in 0..running_mean.len() {
        let m = momentum * running_mean[c].as_f64() + (1.0 - momentum) * cache.batch_mean[c];
        let v = momentum * running_var[c].as_f64() + (1.0 - momentum) * cache.batch_var_unbiased[c];
        running_mean[c] = T::from_f64_lossy(m);
        running_var[c] = T::from_f64_lossy(v);
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let xhat = &cache.xhat;
    if !xhat.same_shape(dy) || gamma.len() != xhat.c {
        return Err(Error::Shape("batch norm backward shape mismatch".into()));
    }
    let plane = dy.plane();
    let count = (dy.n * plane) as f64;
    let mut dx = Tensor4::zeros(dy.n, dy.c, dy.h, dy.w);
    let mut dgamma = Vec::with_capacity(dy.c);
    let mut dbeta = Vec::with_capacity(dy.c);
    for c in 0..dy.c {
        let offsets = (0..dy.n).map(|n| (n * dy.c + c) * plane);
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for o in offsets.clone() {
            for i in o..o + plane {
                let d = dy.data[i].as_f64();
                sdy += d;
                sdyx += d * xhat.data[i].as_f64();
            }
        }
        let k = T::from_f64_lossy(gamma[c].as_f64() * cache.inv_std[c].as_f64() / count);
        let n_t = T::from_f64_lossy(count);
        let (sdy_t, sdyx_t) = (T::from_f64_lossy(sdy), T::from_f64_lossy(sdyx));
        for o in offsets {
            for i in o..o + plane {
                dx.data[i] = k * (n_t * dy.data[i] - sdy_t - xhat.data[i] * sdyx_t);
            }
        }
        dgamma.push(sdyx_t);
        dbeta.push(sdy_t);
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Backward through ReLU given the forward *output*.
pub fn relu_backward<T: Scalar>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, out) in dx.data.iter_mut().zip(&y.data) {
        if *out <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Max pooling; also returns, per output element, the flat input index that won.
/// Ties go to the first maximum in scan order. Padding never wins.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let ho = pooled_extent(x.h, kernel, stride, pad)?;
    let wo = pooled_extent(x.w, kernel, stride, pad)?;
    let mut y = Tensor4::zeros(x.n, x.c, ho, wo);
    let mut arg = vec![0usize; y.len()];
    let mut o = 0;
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * x.plane();
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = base + iy as usize * x.w + ix as usize;
                            if best_i == usize::MAX || x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    if best_i == usize::MAX {
                        return Err(Error::Shape("max-pool window lies entirely in padding".into()));
                    }
                    y.data[o] = best;
                    arg[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool_backward<T: Scalar>(argmax: &[usize], in_shape: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = in_shape;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (i, g) in argmax.iter().zip(&dy.data) {
        dx.data[*i] += *g;
    }
    dx
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let plane = x.plane();
    let data = x
        .data
        .chunks(plane)
        .map(|p| T::from_f64_lossy(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Tensor4 { n: x.n, c: x.c, h: 1, w: 1, data }
}

pub fn global_avg_pool_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = in_shape;
    let scale = T::from_f64_lossy(1.0 / (h * w) as f64);
    let mut data = Vec::with_capacity(n * c * h * w);
    for g in &dy.data {
        data.extend(std::iter::repeat(*g * scale).take(h * w));
    }
    Tensor4 { n, c, h, w, data }
}

/// `y = x W^T + b` with `x` flattened per sample; `weight` is `[out, in]`.
pub fn linear_forward<T: Scalar>(x: &Tensor4<T>, weight: &[T], bias: &[T]) -> Result<Tensor4<T>> {
    let fan_in = x.sample_len();
    let out = bias.len();
    if weight.len() != out * fan_in {
        return Err(Error::Shape(format!(
            "linear weight has {} elements, expected {out}x{fan_in}",
            weight.len()
        )));
    }
    let mut y = Tensor4::zeros(x.n, out, 1, 1);
    T::gemm(x.n, fan_in, out, &x.data, false, weight, true, &mut y.data, false);
    for row in y.data.chunks_mut(out) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
    Ok(y)
}

/// Returns `(dx, dweight, dbias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let fan_in = x.sample_len();
    let out = dy.sample_len();
    if dy.n != x.n || weight.len() != out * fan_in {
        return Err(Error::Shape("linear backward shape mismatch".into()));
    }
    let mut dw = vec![T::zero(); out * fan_in];
    T::gemm(out, x.n, fan_in, &dy.data, true, &x.data, false, &mut dw, false);
    let mut db = vec![T::zero(); out];
    for row in dy.data.chunks(out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += *g;
        }
    }
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    T::gemm(x.n, out, fan_in, &dy.data, false, weight, false, &mut dx.data, false);
    Ok((dx, dw, db))
}

/// Numerically stable softmax of one logit row, computed in double precision.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[derive(Clone, Debug)]
pub struct SoftmaxOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// `n x classes` probabilities.
    pub probs: Vec<f64>,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: Tensor4<T>,
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<SoftmaxOutput<T>> {
    let k = logits.sample_len();
    if labels.len() != logits.n {
        return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), logits.n)));
    }
    if let Some(l) = labels.iter().find(|l| **l >= k) {
        return Err(Error::Shape(format!("label {l} out of range for {k} classes")));
    }
    let n = logits.n as f64;
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(logits.len());
    let mut grad = Tensor4::zeros(logits.n, k, 1, 1);
    for (i, row) in logits.data.chunks(k).enumerate() {
        let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss -= z[labels[i]] - lse;
        for (j, zj) in z.iter().enumerate() {
            let p = (zj - lse).exp();
            probs.push(p);
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            grad.data[i * k + j] = T::from_f64_lossy((p - target) / n);
        }
    }
    Ok(SoftmaxOutput { loss: loss / n, probs, grad })
}
