//! Forward and backward kernels for the differentiable operations.
//!
//! These are plain functions over [`Tensor`] values. The tape in
//! `tape.rs` wires them together; the finite-difference suite in
//! [`crate::gradcheck`] calls the forward halves directly.

use crate::error::{Error, Result};

use super::{Shape, Tensor};

/// `c = a * b + beta * c` for row-major-addressable matrices given by
/// explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * a_strides.0 + (k.max(1) - 1) * a_strides.1 + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, bias: Shape, stride: usize, pad: usize) -> Result<Self> {
        if input.channels != weight.channels {
            return Err(Error::Shape(format!(
                "conv2d input {input} has {} channels but weight {weight} expects {}",
                input.channels, weight.channels
            )));
        }
        if bias != Shape::new(1, weight.batch, 1, 1) {
            return Err(Error::Shape(format!(
                "conv2d bias {bias} does not match weight {weight}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let padded_h = input.height + 2 * pad;
        let padded_w = input.width + 2 * pad;
        if padded_h < weight.height || padded_w < weight.width || weight.height == 0 || weight.width == 0 {
            return Err(Error::Shape(format!(
                "conv2d of input {input} with weight {weight} (pad {pad}) has empty output"
            )));
        }
        Ok(ConvGeometry {
            in_channels: input.channels,
            out_channels: weight.batch,
            kernel_h: weight.height,
            kernel_w: weight.width,
            in_h: input.height,
            in_w: input.width,
            out_h: (padded_h - weight.height) / stride + 1,
            out_w: (padded_w - weight.width) / stride + 1,
            stride,
            pad,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns `ox` whose source `ox*stride + kx - pad` lies in `[0, in_w)`.
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (in_len as isize - off) <= 0 {
            0
        } else {
            (((in_len as isize - off) + s - 1) / s).min(out_len as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let p = self.col_cols();
        cols.fill(0.0);
        for ci in 0..self.in_channels {
            let plane = &input[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel_h {
                let (y_lo, y_hi) = self.valid_range(ky, self.out_h, self.in_h);
                for kx in 0..self.kernel_w {
                    let (x_lo, x_hi) = self.valid_range(kx, self.out_w, self.in_w);
                    let row = (ci * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                        let out_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            let start = x_lo + kx - self.pad;
                            out_row[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                        } else {
                            for ox in x_lo..x_hi {
                                out_row[ox] = src[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], grad_input: &mut [f64]) {
        let p = self.col_cols();
        for ci in 0..self.in_channels {
            let plane =
                &mut grad_input[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel_h {
                let (y_lo, y_hi) = self.valid_range(ky, self.out_h, self.in_h);
                for kx in 0..self.kernel_w {
                    let (x_lo, x_hi) = self.valid_range(kx, self.out_w, self.in_w);
                    let row = (ci * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst = &mut plane[iy * self.in_w..(iy + 1) * self.in_w];
                        let col_row = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in x_lo..x_hi {
                            dst[ox * self.stride + kx - self.pad] += col_row[ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let batch = input.shape().batch;
    let out_shape = Shape::new(batch, g.out_channels, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.in_channels * g.in_h * g.in_w;
    let out_stride = g.out_channels * p;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..batch {
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        let y = &mut out.data_mut()[b * out_stride..(b + 1) * out_stride];
        for (co, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        let cols_ref: &[f64] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        gemm(g.out_channels, k, p, weight.data(), (k, 1), cols_ref, (p, 1), 1.0, y);
    }
    Ok(out)
}

/// Accumulates conv2d gradients into whichever buffers are supplied.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    pad: usize,
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) -> Result<()> {
    let bias_shape = Shape::new(1, weight.shape().batch, 1, 1);
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias_shape, stride, pad)?;
    let batch = input.shape().batch;
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.in_channels * g.in_h * g.in_w;
    let out_stride = g.out_channels * p;
    let mut cols = vec![0.0; k * p];
    for b in 0..batch {
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        let dy = &grad_out[b * out_stride..(b + 1) * out_stride];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (co, row) in dy.chunks_exact(p).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            let cols_ref: &[f64] = if g.is_pointwise() {
                x
            } else {
                g.im2col(x, &mut cols);
                &cols
            };
            // dW (Cout x K) += dY (Cout x P) * cols^T (P x K)
            gemm(g.out_channels, p, k, dy, (p, 1), cols_ref, (1, p), 1.0, gw);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let gi = &mut gi[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                // dX (Cin x P) += W^T (Cin x Cout) * dY (Cout x P)
                gemm(k, g.out_channels, p, weight.data(), (1, k), dy, (p, 1), 1.0, gi);
            } else {
                gemm(k, g.out_channels, p, weight.data(), (1, k), dy, (p, 1), 0.0, &mut cols);
                g.col2im_add(&cols, gi);
            }
        }
    }
    Ok(())
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

pub fn leaky_relu_backward(x: &Tensor, slope: f64, grad_out: &[f64], grad_in: &mut [f64]) {
    for ((gi, &go), &v) in grad_in.iter_mut().zip(grad_out).zip(x.data()) {
        *gi += if v > 0.0 { go } else { slope * go };
    }
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Backward in terms of the forward output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &[f64], grad_in: &mut [f64]) {
    for ((gi, &go), &s) in grad_in.iter_mut().zip(grad_out).zip(y.data()) {
        *gi += go * s * (1.0 - s);
    }
}

/// Non-overlapping `k x k` max pooling. Returns the pooled tensor and the
/// flat input index of each selected element (first maximum in scan order).
pub fn max_pool2d(x: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if k == 0 || s.height % k != 0 || s.width % k != 0 {
        return Err(Error::Shape(format!(
            "max_pool2d with k={k} needs height and width divisible by k, got {s}"
        )));
    }
    let out_shape = Shape::new(s.batch, s.channels, s.height / k, s.width / k);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let d = x.data();
    for bc in 0..s.batch * s.channels {
        let base = bc * s.plane();
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut best_idx = base + (oy * k) * s.width + ox * k;
                let mut best = d[best_idx];
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * s.width + ox * k + dx;
                        if d[idx] > best {
                            best = d[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(out_shape, out)?, argmax))
}

pub fn max_pool2d_backward(argmax: &[usize], grad_out: &[f64], grad_in: &mut [f64]) {
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_in[idx] += g;
    }
}

/// Interpolation taps for one axis: `(lower index, upper index, upper weight)`.
fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out_len = in_len * factor;
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check_upsample(x: &Tensor, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    if x.shape().height == 0 || x.shape().width == 0 {
        return Err(Error::Shape(format!("cannot upsample empty tensor {}", x.shape())));
    }
    Ok(())
}

/// Bilinear upsampling with half-pixel centers and edge clamping.
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    check_upsample(x, factor)?;
    let s = x.shape();
    let ty = bilinear_taps(s.height, factor);
    let tx = bilinear_taps(s.width, factor);
    let out_shape = Shape::new(s.batch, s.channels, s.height * factor, s.width * factor);
    let mut out = Vec::with_capacity(out_shape.numel());
    for bc in 0..s.batch * s.channels {
        let plane = &x.data()[bc * s.plane()..(bc + 1) * s.plane()];
        for &(y0, y1, wy) in &ty {
            let r0 = &plane[y0 * s.width..(y0 + 1) * s.width];
            let r1 = &plane[y1 * s.width..(y1 + 1) * s.width];
            for &(x0, x1, wx) in &tx {
                let top = (1.0 - wx) * r0[x0] + wx * r0[x1];
                let bottom = (1.0 - wx) * r1[x0] + wx * r1[x1];
                out.push((1.0 - wy) * top + wy * bottom);
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn bilinear_upsample_backward(in_shape: Shape, factor: usize, grad_out: &[f64], grad_in: &mut [f64]) {
    let s = in_shape;
    let ty = bilinear_taps(s.height, factor);
    let tx = bilinear_taps(s.width, factor);
    let out_plane = s.plane() * factor * factor;
    for bc in 0..s.batch * s.channels {
        let go = &grad_out[bc * out_plane..(bc + 1) * out_plane];
        let gi = &mut grad_in[bc * s.plane()..(bc + 1) * s.plane()];
        let mut it = go.iter();
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let g = *it.next().expect("sized");
                gi[y0 * s.width + x0] += (1.0 - wy) * (1.0 - wx) * g;
                gi[y0 * s.width + x1] += (1.0 - wy) * wx * g;
                gi[y1 * s.width + x0] += wy * (1.0 - wx) * g;
                gi[y1 * s.width + x1] += wy * wx * g;
            }
        }
    }
}

/// Source flat index in the `(b, c*r*r, h, w)` input for every element of the
/// `(b, c, h*r, w*r)` output.
fn shuffle_index(in_shape: Shape, r: usize) -> Vec<usize> {
    let c_out = in_shape.channels / (r * r);
    let (h, w) = (in_shape.height, in_shape.width);
    let mut idx = Vec::with_capacity(in_shape.numel());
    for b in 0..in_shape.batch {
        for c in 0..c_out {
            for oy in 0..h * r {
                for ox in 0..w * r {
                    let ci = c * r * r + (oy % r) * r + ox % r;
                    idx.push(((b * in_shape.channels + ci) * h + oy / r) * w + ox / r);
                }
            }
        }
    }
    idx
}

fn check_shuffle(s: Shape, r: usize) -> Result<()> {
    if r == 0 || s.channels % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "pixel_shuffle with r={r} needs channels divisible by {}, got {s}",
            r * r
        )));
    }
    Ok(())
}

pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    check_shuffle(s, r)?;
    let out_shape = Shape::new(s.batch, s.channels / (r * r), s.height * r, s.width * r);
    let data = shuffle_index(s, r).into_iter().map(|i| x.data()[i]).collect();
    Tensor::new(out_shape, data)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(y: &Tensor, r: usize) -> Result<Tensor> {
    let s = y.shape();
    if r == 0 || s.height % r != 0 || s.width % r != 0 {
        return Err(Error::Shape(format!(
            "pixel_unshuffle with r={r} needs spatial dims divisible by r, got {s}"
        )));
    }
    let in_shape = Shape::new(s.batch, s.channels * r * r, s.height / r, s.width / r);
    let mut data = vec![0.0; in_shape.numel()];
    for (o, i) in shuffle_index(in_shape, r).into_iter().enumerate() {
        data[i] = y.data()[o];
    }
    Tensor::new(in_shape, data)
}

pub fn pixel_shuffle_backward(in_shape: Shape, r: usize, grad_out: &[f64], grad_in: &mut [f64]) {
    for (o, i) in shuffle_index(in_shape, r).into_iter().enumerate() {
        grad_in[i] += grad_out[o];
    }
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
        .shape();
    let mut channels = 0;
    for t in xs {
        let s = t.shape();
        if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
            return Err(Error::Shape(format!(
                "concat_channels: {s} is incompatible with {first}"
            )));
        }
        channels += s.channels;
    }
    let out_shape = Shape::new(first.batch, channels, first.height, first.width);
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.batch {
        for t in xs {
            let n = t.shape().channels * first.plane();
            data.extend_from_slice(&t.data()[b * n..(b + 1) * n]);
        }
    }
    Tensor::new(out_shape, data)
}

/// Channels `start..start+len` of `x`.
pub fn narrow_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if start + len > s.channels || len == 0 {
        return Err(Error::Shape(format!(
            "channel range {start}..{} out of bounds for {s}",
            start + len
        )));
    }
    let out_shape = Shape::new(s.batch, len, s.height, s.width);
    let mut data = Vec::with_capacity(out_shape.numel());
    let p = s.plane();
    for b in 0..s.batch {
        let base = (b * s.channels + start) * p;
        data.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::new(out_shape, data)
}

pub fn narrow_channels_backward(in_shape: Shape, start: usize, len: usize, grad_out: &[f64], grad_in: &mut [f64]) {
    let p = in_shape.plane();
    for b in 0..in_shape.batch {
        let base = (b * in_shape.channels + start) * p;
        let src = &grad_out[b * len * p..(b + 1) * len * p];
        for (g, s) in grad_in[base..base + len * p].iter_mut().zip(src) {
            *g += s;
        }
    }
}

pub fn check_same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: {a} vs {b}")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same_shape("l1_loss", pred.shape(), target.shape())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}
