//! Forward/backward kernels for the layer set used by the networks.
//!
//! Every function here is pure: it reads its inputs and returns fresh
//! tensors. The autograd tape dispatches into these, and the test suites
//! call them directly against nested-loop oracles and adjoint identities.
//! All loops run in a fixed sequential order so results are bit-identical
//! across runs and thread counts.

use ndarray::ArrayView2;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn as_mat<T: Scalar>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view shape")
}

/// `rows x inner` times `inner x cols` without building intermediate views at
/// call sites. Plain wrapper over ndarray's matmul.
fn matmul<T: Scalar>(a: &[T], b: &[T], rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let a = as_mat(a, rows, inner);
    let b = as_mat(b, inner, cols);
    a.dot(&b).into_raw_vec_and_offset().0
}

fn conv_out_side(side: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride < 1 {
        return Err(Error::Param(format!("stride must be >= 1, got {stride}")));
    }
    let padded = side + 2 * pad;
    if kernel > padded {
        return Err(Error::Dim(format!(
            "kernel {kernel} exceeds padded extent {padded} (side {side}, pad {pad})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 4 {
        return Err(Error::Dim(format!("conv2d input must be [N,C,H,W], got {ishape:?}")));
    }
    if wshape.len() != 4 {
        return Err(Error::Dim(format!("conv2d weight must be [K,C,kh,kw], got {wshape:?}")));
    }
    if ishape[1] != wshape[1] {
        return Err(Error::Dim(format!(
            "conv2d channel mismatch: input axis 1 = {}, weight axis 1 = {}",
            ishape[1], wshape[1]
        )));
    }
    if bias.shape() != [wshape[0]] {
        return Err(Error::Dim(format!(
            "conv2d bias must be [{}], got {:?}",
            wshape[0],
            bias.shape()
        )));
    }
    Ok(ConvDims {
        batch: ishape[0],
        in_channels: ishape[1],
        in_h: ishape[2],
        in_w: ishape[3],
        out_channels: wshape[0],
        kh: wshape[2],
        kw: wshape[3],
        out_h: conv_out_side(ishape[2], wshape[2], stride, pad)?,
        out_w: conv_out_side(ishape[3], wshape[3], stride, pad)?,
    })
}

/// Unfold one sample into a `[C*kh*kw, out_h*out_w]` patch matrix.
fn im2col<T: Scalar>(
    sample: &[T],
    d: &ConvDims,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let (h, w) = (d.in_h, d.in_w);
    let (oh, ow) = (d.out_h, d.out_w);
    let mut row = 0;
    for c in 0..d.in_channels {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let out_row = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the input plane (adjoint of
/// `im2col`): overlapping patches accumulate by addition.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, stride: usize, pad: usize, out: &mut [T]) {
    let (h, w) = (d.in_h, d.in_w);
    let (oh, ow) = (d.out_h, d.out_w);
    let mut row = 0;
    for c in 0..d.in_channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src_row = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += src_row[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, weight, bias, stride, pad)?;
    let patch = d.in_channels * d.kh * d.kw;
    let opix = d.out_h * d.out_w;
    let mut col = vec![T::zero(); patch * opix];
    let mut out = vec![T::zero(); d.batch * d.out_channels * opix];
    let sample_len = d.in_channels * d.in_h * d.in_w;
    for n in 0..d.batch {
        im2col(&input.data()[n * sample_len..(n + 1) * sample_len], &d, stride, pad, &mut col);
        let prod = matmul(weight.data(), &col, d.out_channels, patch, opix);
        let dst = &mut out[n * d.out_channels * opix..(n + 1) * d.out_channels * opix];
        for k in 0..d.out_channels {
            let b = bias.data()[k];
            for (o, &p) in dst[k * opix..(k + 1) * opix].iter_mut().zip(&prod[k * opix..(k + 1) * opix]) {
                *o = p + b;
            }
        }
    }
    Tensor::new(&[d.batch, d.out_channels, d.out_h, d.out_w], out)
}

pub fn conv2d_backward_input<T: Scalar>(
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::zeros(input_shape);
    let bias = Tensor::zeros(&[weight.shape()[0]]);
    let d = conv_dims(&probe, weight, &bias, stride, pad)?;
    let patch = d.in_channels * d.kh * d.kw;
    let opix = d.out_h * d.out_w;
    let sample_len = d.in_channels * d.in_h * d.in_w;
    let mut dinput = vec![T::zero(); d.batch * sample_len];
    // dcol = W^T (K x patch)^T * g_n (K x opix)
    let wt: Vec<T> = {
        let mut t = vec![T::zero(); patch * d.out_channels];
        for k in 0..d.out_channels {
            for r in 0..patch {
                t[r * d.out_channels + k] = weight.data()[k * patch + r];
            }
        }
        t
    };
    for n in 0..d.batch {
        let g = &grad_out.data()[n * d.out_channels * opix..(n + 1) * d.out_channels * opix];
        let dcol = matmul(&wt, g, patch, d.out_channels, opix);
        col2im(&dcol, &d, stride, pad, &mut dinput[n * sample_len..(n + 1) * sample_len]);
    }
    Tensor::new(input_shape, dinput)
}

pub fn conv2d_backward_params<T: Scalar>(
    input: &Tensor<T>,
    weight_shape: &[usize],
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let wprobe = Tensor::zeros(weight_shape);
    let bias = Tensor::zeros(&[weight_shape[0]]);
    let d = conv_dims(input, &wprobe, &bias, stride, pad)?;
    let patch = d.in_channels * d.kh * d.kw;
    let opix = d.out_h * d.out_w;
    let sample_len = d.in_channels * d.in_h * d.in_w;
    let mut dweight = vec![T::zero(); d.out_channels * patch];
    let mut dbias = vec![T::zero(); d.out_channels];
    let mut col = vec![T::zero(); patch * opix];
    for n in 0..d.batch {
        im2col(&input.data()[n * sample_len..(n + 1) * sample_len], &d, stride, pad, &mut col);
        let g = &grad_out.data()[n * d.out_channels * opix..(n + 1) * d.out_channels * opix];
        // dW += g_n (K x opix) * col^T (opix x patch)
        let colt: Vec<T> = {
            let mut t = vec![T::zero(); opix * patch];
            for r in 0..patch {
                for c in 0..opix {
                    t[c * patch + r] = col[r * opix + c];
                }
            }
            t
        };
        let dw = matmul(g, &colt, d.out_channels, opix, patch);
        for (acc, v) in dweight.iter_mut().zip(&dw) {
            *acc += *v;
        }
        for k in 0..d.out_channels {
            let mut s = T::zero();
            for &v in &g[k * opix..(k + 1) * opix] {
                s += v;
            }
            dbias[k] += s;
        }
    }
    Ok((Tensor::new(weight_shape, dweight)?, Tensor::new(&[d.out_channels], dbias)?))
}

fn pool_dims<T: Scalar>(input: &Tensor<T>, k: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if k < 1 || stride < 1 {
        return Err(Error::Param(format!("pool kernel/stride must be >= 1, got k={k} stride={stride}")));
    }
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Dim(format!("pool input must be [N,C,H,W], got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if k > h || k > w {
        return Err(Error::Dim(format!("pool kernel {k} exceeds spatial extents {h}x{w}")));
    }
    Ok((n, c, h, w, (h - k) / stride + 1, (w - k) / stride + 1))
}

/// Max pooling. Returns the pooled map and, per output element, the flat
/// input index of its maximum. Ties go to the first element in row-major
/// window order, which fixes the backward routing.
pub fn maxpool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w, oh, ow) = pool_dims(input, k, stride)?;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    let data = input.data();
    let mut o = 0;
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = data[base + oy * stride * w + ox * stride];
                let mut best_at = base + oy * stride * w + ox * stride;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oy * stride + ki) * w + (ox * stride + kj);
                        if data[idx] > best {
                            best = data[idx];
                            best_at = idx;
                        }
                    }
                }
                out[o] = best;
                argmax[o] = best_at;
                o += 1;
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Internal("maxpool argmax/grad length mismatch".into()));
    }
    let mut dinput = Tensor::zeros(input_shape);
    let d = dinput.data_mut();
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        d[at] += g;
    }
    Ok(dinput)
}

pub fn avgpool2d_forward<T: Scalar>(input: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = pool_dims(input, k, stride)?;
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let data = input.data();
    let mut o = 0;
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ki in 0..k {
                    for kj in 0..k {
                        s += data[base + (oy * stride + ki) * w + (ox * stride + kj)];
                    }
                }
                out[o] = s * inv;
                o += 1;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avgpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    k: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut dinput = Tensor::zeros(input_shape);
    let d = dinput.data_mut();
    let g = grad_out.data();
    let mut o = 0;
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[o] * inv;
                for ki in 0..k {
                    for kj in 0..k {
                        d[base + (oy * stride + ki) * w + (ox * stride + kj)] += gv;
                    }
                }
                o += 1;
            }
        }
    }
    Ok(dinput)
}

/// Window bounds of an adaptive pool: output cell `i` of `out` covers input
/// rows `[floor(i*in/out), ceil((i+1)*in/out))`.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avgpool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Dim(format!("adaptive pool input must be [N,C,H,W], got {shape:?}")));
    }
    if out_h < 1 || out_w < 1 {
        return Err(Error::Param("adaptive pool output must be >= 1".into()));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    let data = input.data();
    let mut o = 0;
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..out_h {
            let (hs, he) = adaptive_window(oy, h, out_h);
            for ox in 0..out_w {
                let (ws, we) = adaptive_window(ox, w, out_w);
                let mut s = T::zero();
                for iy in hs..he {
                    for ix in ws..we {
                        s += data[base + iy * w + ix];
                    }
                }
                out[o] = s * T::from_f64(1.0 / ((he - hs) * (we - ws)) as f64);
                o += 1;
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub fn adaptive_avgpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let mut dinput = Tensor::zeros(input_shape);
    let d = dinput.data_mut();
    let g = grad_out.data();
    let mut o = 0;
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..out_h {
            let (hs, he) = adaptive_window(oy, h, out_h);
            for ox in 0..out_w {
                let (ws, we) = adaptive_window(ox, w, out_w);
                let gv = g[o] * T::from_f64(1.0 / ((he - hs) * (we - ws)) as f64);
                for iy in hs..he {
                    for ix in ws..we {
                        d[base + iy * w + ix] += gv;
                    }
                }
                o += 1;
            }
        }
    }
    Ok(dinput)
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(input.shape(), |i| input.data()[i].max(T::zero()))
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(input.shape(), |i| {
        if input.data()[i] > T::zero() {
            grad_out.data()[i]
        } else {
            T::zero()
        }
    })
}

fn affine_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 2 || wshape.len() != 2 {
        return Err(Error::Dim(format!(
            "affine expects [N,D] x [D,E], got {ishape:?} x {wshape:?}"
        )));
    }
    if ishape[1] != wshape[0] {
        return Err(Error::Dim(format!(
            "affine inner dimension mismatch: input axis 1 = {}, weight axis 0 = {}",
            ishape[1], wshape[0]
        )));
    }
    Ok((ishape[0], ishape[1], wshape[1]))
}

/// `X (N x D) * W (D x E)`, no bias.
pub fn linear_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, e) = affine_dims(input, weight)?;
    Tensor::new(&[n, e], matmul(input.data(), weight.data(), n, d, e))
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d, e) = affine_dims(input, weight)?;
    let mut wt = vec![T::zero(); e * d];
    for r in 0..d {
        for c in 0..e {
            wt[c * d + r] = weight.data()[r * e + c];
        }
    }
    let dinput = matmul(grad_out.data(), &wt, n, e, d);
    let mut xt = vec![T::zero(); d * n];
    for r in 0..n {
        for c in 0..d {
            xt[c * n + r] = input.data()[r * d + c];
        }
    }
    let dweight = matmul(&xt, grad_out.data(), d, n, e);
    Ok((Tensor::new(&[n, d], dinput)?, Tensor::new(&[d, e], dweight)?))
}

pub fn affine_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, _, e) = affine_dims(input, weight)?;
    if bias.shape() != [e] {
        return Err(Error::Dim(format!("affine bias must be [{e}], got {:?}", bias.shape())));
    }
    let mut out = linear_forward(input, weight)?;
    let data = out.data_mut();
    for r in 0..n {
        for c in 0..e {
            data[r * e + c] += bias.data()[c];
        }
    }
    Ok(out)
}

pub fn bias_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, e) = (grad_out.shape()[0], grad_out.shape()[1]);
    let mut db = vec![T::zero(); e];
    for r in 0..n {
        for c in 0..e {
            db[c] += grad_out.data()[r * e + c];
        }
    }
    Tensor::new(&[e], db).expect("bias grad shape")
}

/// Crop a fixed window from each sample of a `[N,D,H,W]` stack. `starts`
/// gives the top-left corner per sample; `None` yields a zero crop (used for
/// missing parts — the zero block contributes nothing downstream, which is
/// the same as skipping the part's term).
pub fn crop_windows_forward<T: Scalar>(
    features: &Tensor<T>,
    starts: &[Option<(usize, usize)>],
    crop: usize,
) -> Result<Tensor<T>> {
    let shape = features.shape();
    if shape.len() != 4 {
        return Err(Error::Dim(format!("crop input must be [N,D,H,W], got {shape:?}")));
    }
    let (n, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if starts.len() != n {
        return Err(Error::Internal(format!(
            "crop starts length {} does not match batch {}",
            starts.len(),
            n
        )));
    }
    if crop > h || crop > w {
        return Err(Error::Config(format!("crop side {crop} exceeds grid {h}x{w}")));
    }
    let mut out = vec![T::zero(); n * d * crop * crop];
    let data = features.data();
    for (s, &start) in starts.iter().enumerate() {
        let Some((y0, x0)) = start else { continue };
        if y0 + crop > h || x0 + crop > w {
            return Err(Error::Internal(format!("crop window ({y0},{x0}) out of {h}x{w}")));
        }
        for c in 0..d {
            let src = &data[(s * d + c) * h * w..];
            let dst = &mut out[(s * d + c) * crop * crop..(s * d + c + 1) * crop * crop];
            for dy in 0..crop {
                for dx in 0..crop {
                    dst[dy * crop + dx] = src[(y0 + dy) * w + (x0 + dx)];
                }
            }
        }
    }
    Tensor::new(&[n, d, crop, crop], out)
}

/// Adjoint of `crop_windows_forward`: scatter each crop gradient back into a
/// zero-initialized full grid, accumulating where windows overlap.
pub fn crop_windows_backward<T: Scalar>(
    grad_crops: &Tensor<T>,
    starts: &[Option<(usize, usize)>],
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let shape = grad_crops.shape();
    let (n, d, crop) = (shape[0], shape[1], shape[2]);
    if starts.len() != n {
        return Err(Error::Internal("crop starts/grad batch mismatch".into()));
    }
    let mut out = Tensor::zeros(&[n, d, h, w]);
    let dst_all = out.data_mut();
    let g = grad_crops.data();
    for (s, &start) in starts.iter().enumerate() {
        let Some((y0, x0)) = start else { continue };
        for c in 0..d {
            let src = &g[(s * d + c) * crop * crop..(s * d + c + 1) * crop * crop];
            let dst = &mut dst_all[(s * d + c) * h * w..(s * d + c + 1) * h * w];
            for dy in 0..crop {
                for dx in 0..crop {
                    dst[(y0 + dy) * w + (x0 + dx)] += src[dy * crop + dx];
                }
            }
        }
    }
    Ok(out)
}

/// Channel softmax at every spatial position of a `[N,C,H,W]` stack.
pub fn spatial_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(Error::Dim(format!("spatial softmax expects [N,C,H,W], got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut out = vec![T::zero(); logits.len()];
    let data = logits.data();
    for s in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (s * c + ch) * hw + p;
            let mut m = data[idx(0)];
            for ch in 1..c {
                m = m.max(data[idx(ch)]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (data[idx(ch)] - m).exp();
                out[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[idx(ch)] = out[idx(ch)] / z;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Sum over positions of the negative log softmax probability of the labeled
/// channel, averaged over the batch. Labels hold one channel index per
/// position, per sample. Returns the loss and the softmax (saved for the
/// backward pass).
pub fn spatial_softmax_loss_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[&[u32]],
) -> Result<(T, Tensor<T>)> {
    let shape = logits.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.len() != n {
        return Err(Error::Dim(format!("expected {n} label grids, got {}", labels.len())));
    }
    let hw = h * w;
    let softmax = spatial_softmax(logits)?;
    let mut loss = T::zero();
    for (s, grid) in labels.iter().enumerate() {
        if grid.len() != hw {
            return Err(Error::Dim(format!(
                "label grid {} has {} cells, logits have {}",
                s,
                grid.len(),
                hw
            )));
        }
        for (p, &lab) in grid.iter().enumerate() {
            if lab as usize >= c {
                return Err(Error::Annotation(format!(
                    "label {lab} out of range for {c} channels"
                )));
            }
            let prob = softmax.data()[(s * c + lab as usize) * hw + p];
            loss -= prob.max(T::from_f64(1e-30)).ln();
        }
    }
    Ok((loss / T::from_f64(n as f64), softmax))
}

pub fn spatial_softmax_loss_backward<T: Scalar>(
    softmax: &Tensor<T>,
    labels: &[&[u32]],
    grad_scale: T,
) -> Tensor<T> {
    let shape = softmax.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let scale = grad_scale / T::from_f64(n as f64);
    let mut dlogits = softmax.clone();
    let d = dlogits.data_mut();
    for (s, grid) in labels.iter().enumerate() {
        for (p, &lab) in grid.iter().enumerate() {
            d[(s * c + lab as usize) * hw + p] -= T::one();
        }
    }
    for v in d.iter_mut() {
        *v *= scale;
    }
    dlogits
}

/// Mean softmax cross-entropy over a `[N,K]` score matrix with one class
/// label per row.
pub fn softmax_xent_forward<T: Scalar>(
    scores: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::Dim(format!("cross entropy expects [N,K], got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Dim(format!("expected {n} labels, got {}", labels.len())));
    }
    let data = scores.data();
    let mut softmax = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for r in 0..n {
        if labels[r] >= k {
            return Err(Error::Annotation(format!("class label {} out of range {k}", labels[r])));
        }
        let row = &data[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(row[0], T::max);
        let mut z = T::zero();
        for c in 0..k {
            let e = (row[c] - m).exp();
            softmax[r * k + c] = e;
            z += e;
        }
        for c in 0..k {
            softmax[r * k + c] = softmax[r * k + c] / z;
        }
        loss -= softmax[r * k + labels[r]].max(T::from_f64(1e-30)).ln();
    }
    Ok((loss / T::from_f64(n as f64), Tensor::new(&[n, k], softmax)?))
}

pub fn softmax_xent_backward<T: Scalar>(
    softmax: &Tensor<T>,
    labels: &[usize],
    grad_scale: T,
) -> Tensor<T> {
    let (n, k) = (softmax.shape()[0], softmax.shape()[1]);
    let scale = grad_scale / T::from_f64(n as f64);
    let mut d = softmax.clone();
    let dd = d.data_mut();
    for (r, &lab) in labels.iter().enumerate() {
        dd[r * k + lab] -= T::one();
    }
    for v in dd.iter_mut() {
        *v *= scale;
    }
    d
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]))
}

pub fn scale_forward<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    Tensor::from_fn(a.shape(), |i| a.data()[i] * c)
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> T {
    let mut s = T::zero();
    for &v in a.data() {
        s += v;
    }
    s
}

/// Inner product of two same-shaped tensors, used by the adjoint tests.
pub fn dot_all<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Dim("dot shape mismatch".into()));
    }
    let mut s = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        s += x * y;
    }
    Ok(s)
}
