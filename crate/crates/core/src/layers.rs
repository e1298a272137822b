//! Convolutional stem building blocks and the fully connected baseline head.
//!
//! Each layer is a pair of pure kernels, `*_forward` and `*_backward`, that
//! the autodiff tape stitches together. Convolutions are valid-padding
//! cross-correlations computed by im2col + matmul. Feature maps are laid out
//! `[N, H, W, C]` row-major; per-sample rank-3 inputs are accepted where the
//! contracts call for them.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Fill, Scalar, Tensor};

/// Valid-padding square-kernel convolution parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Output spatial extent: floor((in - kernel) / stride) + 1.
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        if input < self.kernel {
            return Err(Error::shape(format!(
                "input extent {input} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok((input - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.kernel,
            self.kernel,
            self.in_channels,
            self.out_channels,
        ]
    }

    pub fn param_count(&self) -> u64 {
        (self.kernel * self.kernel * self.in_channels * self.out_channels) as u64
    }

    /// He-style init: normal(0, sqrt(2 / fan_in)), fan_in = k*k*Cin.
    pub fn init_weights<T: Scalar>(&self, rng: &mut SeededRng) -> Tensor<T> {
        let fan_in = (self.kernel * self.kernel * self.in_channels) as f64;
        Tensor::create(
            &self.weight_shape(),
            Fill::Normal {
                mean: 0.0,
                std: (2.0 / fan_in).sqrt(),
                rng,
            },
        )
        .expect("valid conv weight shape")
    }
}

/// Fully connected layer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub has_bias: bool,
}

impl DenseSpec {
    pub fn param_count(&self) -> u64 {
        let w = (self.in_features * self.out_features) as u64;
        if self.has_bias {
            w + self.out_features as u64
        } else {
            w
        }
    }

    pub fn init_weights<T: Scalar>(&self, rng: &mut SeededRng) -> Tensor<T> {
        Tensor::create(
            &[self.in_features, self.out_features],
            Fill::Normal {
                mean: 0.0,
                std: (2.0 / self.in_features as f64).sqrt(),
                rng,
            },
        )
        .expect("valid dense weight shape")
    }
}

/// Trainable scale/shift plus running statistics for one batch-norm layer.
///
/// `running = momentum * running + (1 - momentum) * batch` after every
/// train-mode forward; eval mode normalizes with the running values.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: T::from_f64(BN_MOMENTUM),
            epsilon: T::from_f64(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn fold_batch_stats(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let one_m = T::one() - m;
        for (r, &b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(stats.mean.data())
        {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self
            .running_var
            .data_mut()
            .iter_mut()
            .zip(stats.var.data())
        {
            *r = m * *r + one_m * b;
        }
    }
}

/// Per-channel batch moments from one train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Saved context for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn rows_channels<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<usize> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "batchnorm wants rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let c = *x.shape().last().unwrap();
    if c != channels {
        return Err(Error::shape(format!(
            "batchnorm channel mismatch: input {:?} vs {channels} channels",
            x.shape()
        )));
    }
    Ok(x.len() / c)
}

/// Train-mode batch normalization over the last axis.
///
/// Normalizes each channel with the biased batch moments taken over all other
/// axes, then scales by gamma and shifts by beta.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: T,
) -> Result<(Tensor<T>, BnCache<T>, BatchStats<T>)> {
    let c = gamma.len();
    let rows = rows_channels(x, c)?;
    if rows < 2 {
        return Err(Error::config(
            "batchnorm in train mode requires batch size >= 2",
        ));
    }
    let rn = T::from_f64(rows as f64);
    let mut mean = vec![T::zero(); c];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(&x.data()[r * c..(r + 1) * c]) {
            *m = *m + v;
        }
    }
    for m in mean.iter_mut() {
        *m = *m / rn;
    }
    let mut var = vec![T::zero(); c];
    for r in 0..rows {
        for k in 0..c {
            let d = x.data()[r * c + k] - mean[k];
            var[k] = var[k] + d * d;
        }
    }
    for v in var.iter_mut() {
        *v = *v / rn;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();

    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for r in 0..rows {
        for k in 0..c {
            let idx = r * c + k;
            let h = (x.data()[idx] - mean[k]) * inv_std[k];
            xhat[idx] = h;
            y[idx] = gamma.data()[k] * h + beta.data()[k];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BnCache {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        },
        BatchStats {
            mean: Tensor::new(vec![c], mean)?,
            var: Tensor::new(vec![c], var)?,
        },
    ))
}

/// Eval-mode batch normalization using the running statistics.
pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: T,
) -> Result<Tensor<T>> {
    let c = gamma.len();
    let rows = rows_channels(x, c)?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + epsilon).sqrt())
        .collect();
    let mut y = vec![T::zero(); x.len()];
    for r in 0..rows {
        for k in 0..c {
            let idx = r * c + k;
            y[idx] =
                gamma.data()[k] * (x.data()[idx] - running_mean.data()[k]) * inv_std[k] + beta.data()[k];
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Gradients through the batch statistics: returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.len();
    let rows = cache.xhat.len() / c;
    let rn = T::from_f64(rows as f64);

    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    let mut sum_dxhat = vec![T::zero(); c];
    let mut sum_dxhat_xhat = vec![T::zero(); c];
    for r in 0..rows {
        for k in 0..c {
            let idx = r * c + k;
            let g = grad.data()[idx];
            let h = cache.xhat.data()[idx];
            dbeta[k] = dbeta[k] + g;
            dgamma[k] = dgamma[k] + g * h;
            let dxh = g * gamma.data()[k];
            sum_dxhat[k] = sum_dxhat[k] + dxh;
            sum_dxhat_xhat[k] = sum_dxhat_xhat[k] + dxh * h;
        }
    }

    let mut dx = vec![T::zero(); cache.xhat.len()];
    for r in 0..rows {
        for k in 0..c {
            let idx = r * c + k;
            let dxh = grad.data()[idx] * gamma.data()[k];
            let h = cache.xhat.data()[idx];
            dx[idx] = cache.inv_std[k] / rn * (rn * dxh - sum_dxhat[k] - h * sum_dxhat_xhat[k]);
        }
    }
    Ok((
        Tensor::new(cache.xhat.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

fn as_batched<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.rank() {
        4 => Ok((x.clone(), true)),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            Ok((x.reshape(&shape)?, false))
        }
        r => Err(Error::shape(format!(
            "expected [N,H,W,C] or [H,W,C] feature maps, got rank {r}"
        ))),
    }
}

/// Lower `[N,H,W,C]` patches into a `[N*OH*OW, k*k*C]` matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec, oh: usize, ow: usize) -> Tensor<T> {
    let (n, h, w, c) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    debug_assert_eq!(c, spec.in_channels);
    let k = spec.kernel;
    let s = spec.stride;
    let row_len = k * k * c;
    let mut cols = vec![T::zero(); n * oh * ow * row_len];
    let xd = x.data();
    let mut r = 0usize;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst_base = r * row_len;
                for ki in 0..k {
                    let src = ((b * h + oy * s + ki) * w + ox * s) * c;
                    let dst = dst_base + ki * k * c;
                    cols[dst..dst + k * c].copy_from_slice(&xd[src..src + k * c]);
                }
                r += 1;
            }
        }
    }
    Tensor::new(vec![n * oh * ow, row_len], cols).expect("im2col shape")
}

/// Scatter a `[N*OH*OW, k*k*C]` gradient back onto the input feature maps.
fn col2im<T: Scalar>(
    dcols: &Tensor<T>,
    in_shape: &[usize],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let k = spec.kernel;
    let s = spec.stride;
    let row_len = k * k * c;
    let mut dx = vec![T::zero(); n * h * w * c];
    let dd = dcols.data();
    let mut r = 0usize;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src_base = r * row_len;
                for ki in 0..k {
                    let dst = ((b * h + oy * s + ki) * w + ox * s) * c;
                    let src = src_base + ki * k * c;
                    for i in 0..k * c {
                        dx[dst + i] = dx[dst + i] + dd[src + i];
                    }
                }
                r += 1;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("col2im shape")
}

/// Valid-padding cross-correlation. Returns the output and the im2col matrix
/// (kept for the backward pass).
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (xb, batched) = as_batched(x)?;
    let (n, h, wd, c) = (
        xb.shape()[0],
        xb.shape()[1],
        xb.shape()[2],
        xb.shape()[3],
    );
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {:?} vs spec {}",
            x.shape(),
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(Error::shape(format!(
            "conv2d weight shape {:?} does not match spec {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    let oh = spec.out_extent(h)?;
    let ow = spec.out_extent(wd)?;
    let cols = im2col(&xb, spec, oh, ow);
    let w_flat = w.reshape(&[spec.kernel * spec.kernel * c, spec.out_channels])?;
    let out = cols.matmul(&w_flat)?;
    let out = if batched {
        out.reshape(&[n, oh, ow, spec.out_channels])?
    } else {
        out.reshape(&[oh, ow, spec.out_channels])?
    };
    Ok((out, cols))
}

/// Gradients of the convolution: returns (dx, dw).
pub fn conv2d_backward<T: Scalar>(
    in_shape: &[usize],
    cols: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let batched = in_shape.len() == 4;
    let shape4: Vec<usize> = if batched {
        in_shape.to_vec()
    } else {
        let mut s = vec![1];
        s.extend_from_slice(in_shape);
        s
    };
    let (h, wd) = (shape4[1], shape4[2]);
    let oh = spec.out_extent(h)?;
    let ow = spec.out_extent(wd)?;
    let g_flat = grad.reshape(&[shape4[0] * oh * ow, spec.out_channels])?;

    let dw_flat = cols.transpose2d()?.matmul(&g_flat)?;
    let dw = dw_flat.reshape(&spec.weight_shape())?;

    let w_flat = w.reshape(&[spec.kernel * spec.kernel * spec.in_channels, spec.out_channels])?;
    let dcols = g_flat.matmul(&w_flat.transpose2d()?)?;
    let dx4 = col2im(&dcols, &shape4, spec, oh, ow);
    let dx = if batched {
        dx4
    } else {
        dx4.reshape(in_shape)?
    };
    Ok((dx, dw))
}

/// 2x2 max pooling with stride 2, valid padding. Returns the output and the
/// flat input index of each window's maximum (first occurrence on ties).
pub fn maxpool2x2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (xb, batched) = as_batched(x)?;
    let (n, h, w, c) = (
        xb.shape()[0],
        xb.shape()[1],
        xb.shape()[2],
        xb.shape()[3],
    );
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "maxpool2x2 wants spatial extents >= 2, got {:?}",
            x.shape()
        )));
    }
    let oh = (h - 2) / 2 + 1;
    let ow = (w - 2) / 2 + 1;
    let xd = xb.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    let mut argmax = vec![0usize; n * oh * ow * c];
    let mut o = 0usize;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + oy * 2) * w + ox * 2) * c + ch;
                    let mut best = xd[best_idx];
                    // Fixed window scan order makes the tie rule "first wins".
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
    let shape = if batched {
        vec![n, oh, ow, c]
    } else {
        vec![oh, ow, c]
    };
    Ok((Tensor::new(shape, out)?, argmax))
}

/// Routes the gradient to each window's argmax.
pub fn maxpool2x2_backward<T: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let total: usize = in_shape.iter().product();
    let mut dx = vec![T::zero(); total];
    for (g, &idx) in grad.data().iter().zip(argmax) {
        dx[idx] = dx[idx] + *g;
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Affine map `x . w + bias` on `[N, in]` inputs.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut y = x.matmul(w)?;
    let out = w.shape()[1];
    if bias.shape() != [out] {
        return Err(Error::shape(format!(
            "dense bias shape {:?} vs out features {out}",
            bias.shape()
        )));
    }
    let rows = y.len() / out;
    for r in 0..rows {
        for k in 0..out {
            let idx = r * out + k;
            y.data_mut()[idx] = y.data()[idx] + bias.data()[k];
        }
    }
    Ok(y)
}

/// Gradients of the dense layer: returns (dx, dw, dbias).
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dx = grad.matmul(&w.transpose2d()?)?;
    let dw = x.transpose2d()?.matmul(grad)?;
    let db = grad.sum(Some(0))?;
    Ok((dx, dw, db))
}
