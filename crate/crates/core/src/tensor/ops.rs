//! Forward and backward kernels.
//!
//! Convolutions lower to im2col + SGEMM per batch item. Each output element
//! is reduced in a fixed order, so results do not depend on scheduling.

use super::Tensor;
use crate::error::{Error, Result};

/// Tensors a convolution backward pass reads back from its forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ConvSaved<'a> {
    pub input: Option<&'a Tensor>,
    pub weight: &'a Tensor,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<'a> ConvSaved<'a> {
    pub fn new(input: &'a Tensor, weight: &'a Tensor, stride: usize, padding: usize) -> Self {
        ConvSaved {
            input: Some(input),
            weight,
            stride,
            padding,
            output_padding: 0,
        }
    }

    fn input(&self) -> Result<&'a Tensor> {
        self.input
            .ok_or_else(|| Error::State("convolution backward called without its saved input".into()))
    }
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Row-major `c = a·b + beta·c`, where `a` is `m×k` (or stored `k×m` when
/// `trans_a`) and `b` is `k×n` (or stored `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n index ranges
    // addressed through the strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry shared by im2col/col2im: a `channels×height×width` image read
/// through a `kernel×kernel` window placed at `out_h×out_w` positions.
#[derive(Clone, Copy, Debug)]
struct Patches {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output index `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, image: &[f32], col: &mut [f32]) {
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oi in 0..self.out_h {
                        let line = &mut dst[oi * self.out_w..(oi + 1) * self.out_w];
                        match self.source(oi, ki, self.height) {
                            None => line.fill(0.0),
                            Some(si) => {
                                let src = &plane[si * self.width..(si + 1) * self.width];
                                for (oj, v) in line.iter_mut().enumerate() {
                                    *v = self.source(oj, kj, self.width).map_or(0.0, |sj| src[sj]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into `image` (the adjoint of [`Patches::im2col`]).
    fn col2im(&self, col: &[f32], image: &mut [f32]) {
        let cols = self.cols();
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oi in 0..self.out_h {
                        let Some(si) = self.source(oi, ki, self.height) else {
                            continue;
                        };
                        let line = &src[oi * self.out_w..(oi + 1) * self.out_w];
                        for (oj, &v) in line.iter().enumerate() {
                            if let Some(sj) = self.source(oj, kj, self.width) {
                                plane[si * self.width + sj] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel(weight: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let (a, b, kh, kw) = weight
        .dims4()
        .map_err(|_| Error::dim(format!("{what}: weight must be rank 4, found {:?}", weight.shape())))?;
    if kh != kw {
        return Err(Error::dim(format!(
            "{what}: only square kernels are supported, found {kh}×{kw}"
        )));
    }
    Ok((a, b, kh))
}

fn check_bias(bias: &Tensor, channels: usize, what: &str) -> Result<()> {
    if bias.numel() != channels {
        return Err(Error::dim(format!(
            "{what}: bias has {} entries, expected one per output channel ({channels})",
            bias.numel()
        )));
    }
    Ok(())
}

/// Output extent of a strided convolution: `floor((n + 2p − k)/s) + 1`.
pub fn conv_output_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    (stride >= 1 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(n − 1)·s − 2p + k + output_padding`.
pub fn conv_transpose_output_extent(
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    let extent = (n as i64 - 1) * stride as i64 - 2 * padding as i64 + kernel as i64
        + output_padding as i64;
    (n >= 1 && extent > 0).then_some(extent as usize)
}

fn add_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        if b != 0.0 {
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad(grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let mut acc = vec![0.0f64; c];
    for item in 0..n {
        for (ch, slot) in acc.iter_mut().enumerate() {
            let start = (item * c + ch) * plane;
            *slot += grad_out.data()[start..start + plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    Tensor::new(vec![c], acc.into_iter().map(|v| v as f32).collect())
}

/// 2-D convolution. `input` is `N×C×H×W`, `weight` is `O×C×K×K`, `bias` has `O` entries.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (o, ci, k) = check_kernel(weight, "conv2d")?;
    if ci != c {
        return Err(Error::dim(format!(
            "conv2d: input channel axis (1) is {c} but weight input axis (1) is {ci}"
        )));
    }
    check_bias(bias, o, "conv2d")?;
    if stride == 0 {
        return Err(Error::dim("conv2d: stride must be at least 1"));
    }
    let (oh, ow) = match (
        conv_output_extent(h, k, stride, padding),
        conv_output_extent(w, k, stride, padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::dim(format!(
                "conv2d: kernel {k} does not fit spatial axes (2, 3) = {h}×{w} with padding {padding}"
            )))
        }
    };
    let geo = Patches {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h: oh,
        out_w: ow,
    };
    let in_item = c * h * w;
    let out_item = o * oh * ow;
    let mut out = vec![0.0f32; n * out_item];
    let mut col = vec![0.0f32; geo.rows() * geo.cols()];
    for item in 0..n {
        let image = &input.data()[item * in_item..(item + 1) * in_item];
        geo.im2col(image, &mut col);
        let dst = &mut out[item * out_item..(item + 1) * out_item];
        gemm(o, geo.rows(), geo.cols(), weight.data(), false, &col, false, 0.0, dst);
        add_bias(dst, bias.data(), oh * ow);
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

pub fn conv2d_backward(grad_out: &Tensor, saved: &ConvSaved<'_>) -> Result<ConvGrads> {
    let input = saved.input()?;
    let (n, c, h, w) = input.dims4()?;
    let (o, _, k) = check_kernel(saved.weight, "conv2d backward")?;
    let oh = conv_output_extent(h, k, saved.stride, saved.padding)
        .ok_or_else(|| Error::dim("conv2d backward: invalid saved geometry"))?;
    let ow = conv_output_extent(w, k, saved.stride, saved.padding)
        .ok_or_else(|| Error::dim("conv2d backward: invalid saved geometry"))?;
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::dim(format!(
            "conv2d backward: grad_out shape {:?} differs from forward output {:?}",
            grad_out.shape(),
            [n, o, oh, ow]
        )));
    }
    let geo = Patches {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride: saved.stride,
        padding: saved.padding,
        out_h: oh,
        out_w: ow,
    };
    let (rows, cols) = (geo.rows(), geo.cols());
    let in_item = c * h * w;
    let out_item = o * oh * ow;
    let mut grad_input = vec![0.0f32; input.numel()];
    let mut grad_weight = vec![0.0f32; saved.weight.numel()];
    let mut col = vec![0.0f32; rows * cols];
    let mut grad_col = vec![0.0f32; rows * cols];
    for item in 0..n {
        let image = &input.data()[item * in_item..(item + 1) * in_item];
        let g = &grad_out.data()[item * out_item..(item + 1) * out_item];
        geo.im2col(image, &mut col);
        // dW += dY · colᵀ
        gemm(o, cols, rows, g, false, &col, true, 1.0, &mut grad_weight);
        // dcol = Wᵀ · dY
        gemm(rows, o, cols, saved.weight.data(), true, g, false, 0.0, &mut grad_col);
        geo.col2im(&grad_col, &mut grad_input[item * in_item..(item + 1) * in_item]);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_input)?,
        weight: Tensor::new(saved.weight.shape().to_vec(), grad_weight)?,
        bias: bias_grad(grad_out)?,
    })
}

/// Transposed 2-D convolution. `weight` is `C_in×C_out×K×K`.
pub fn conv_transpose2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (ci, o, k) = check_kernel(weight, "conv_transpose2d")?;
    if ci != c {
        return Err(Error::dim(format!(
            "conv_transpose2d: input channel axis (1) is {c} but weight input axis (0) is {ci}"
        )));
    }
    check_bias(bias, o, "conv_transpose2d")?;
    if stride == 0 {
        return Err(Error::dim("conv_transpose2d: stride must be at least 1"));
    }
    if output_padding >= stride {
        return Err(Error::dim(format!(
            "conv_transpose2d: output_padding {output_padding} must be smaller than stride {stride}"
        )));
    }
    let (oh, ow) = match (
        conv_transpose_output_extent(h, k, stride, padding, output_padding),
        conv_transpose_output_extent(w, k, stride, padding, output_padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::dim(format!(
                "conv_transpose2d: computed output extent is not positive for input {h}×{w}, kernel {k}, stride {stride}, padding {padding}"
            )))
        }
    };
    let geo = Patches {
        channels: o,
        height: oh,
        width: ow,
        kernel: k,
        stride,
        padding,
        out_h: h,
        out_w: w,
    };
    let in_item = c * h * w;
    let out_item = o * oh * ow;
    let mut out = vec![0.0f32; n * out_item];
    let mut col = vec![0.0f32; geo.rows() * geo.cols()];
    for item in 0..n {
        let x = &input.data()[item * in_item..(item + 1) * in_item];
        // col = Wᵀ · x, then scatter into the larger output plane.
        gemm(geo.rows(), c, geo.cols(), weight.data(), true, x, false, 0.0, &mut col);
        let dst = &mut out[item * out_item..(item + 1) * out_item];
        geo.col2im(&col, dst);
        add_bias(dst, bias.data(), oh * ow);
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

pub fn conv_transpose2d_backward(grad_out: &Tensor, saved: &ConvSaved<'_>) -> Result<ConvGrads> {
    let input = saved.input()?;
    let (n, c, h, w) = input.dims4()?;
    let (_, o, k) = check_kernel(saved.weight, "conv_transpose2d backward")?;
    let geometry_err = || Error::dim("conv_transpose2d backward: invalid saved geometry");
    let oh = conv_transpose_output_extent(h, k, saved.stride, saved.padding, saved.output_padding)
        .ok_or_else(geometry_err)?;
    let ow = conv_transpose_output_extent(w, k, saved.stride, saved.padding, saved.output_padding)
        .ok_or_else(geometry_err)?;
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::dim(format!(
            "conv_transpose2d backward: grad_out shape {:?} differs from forward output {:?}",
            grad_out.shape(),
            [n, o, oh, ow]
        )));
    }
    let geo = Patches {
        channels: o,
        height: oh,
        width: ow,
        kernel: k,
        stride: saved.stride,
        padding: saved.padding,
        out_h: h,
        out_w: w,
    };
    let (rows, cols) = (geo.rows(), geo.cols());
    let in_item = c * h * w;
    let out_item = o * oh * ow;
    let mut grad_input = vec![0.0f32; input.numel()];
    let mut grad_weight = vec![0.0f32; saved.weight.numel()];
    let mut grad_col = vec![0.0f32; rows * cols];
    for item in 0..n {
        let x = &input.data()[item * in_item..(item + 1) * in_item];
        let g = &grad_out.data()[item * out_item..(item + 1) * out_item];
        geo.im2col(g, &mut grad_col);
        // dx = W · dcol
        gemm(
            c,
            rows,
            cols,
            saved.weight.data(),
            false,
            &grad_col,
            false,
            0.0,
            &mut grad_input[item * in_item..(item + 1) * in_item],
        );
        // dW += x · dcolᵀ
        gemm(c, cols, rows, x, false, &grad_col, true, 1.0, &mut grad_weight);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_input)?,
        weight: Tensor::new(saved.weight.shape().to_vec(), grad_weight)?,
        bias: bias_grad(grad_out)?,
    })
}

/// 2×2 max-pool with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index into `input` of the window maximum.
/// Ties keep the first position in row-major order.
pub fn maxpool2d_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "maxpool2d: spatial axes (2, 3) must be even, found {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward(
    grad_out: &Tensor,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor> {
    if grad_out.numel() != argmax.len() {
        return Err(Error::dim(format!(
            "maxpool2d backward: {} gradients for {} recorded maxima",
            grad_out.numel(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let len = grad.numel();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        if idx >= len {
            return Err(Error::State(format!(
                "maxpool2d backward: recorded index {idx} outside input of {len} elements"
            )));
        }
        grad.data_mut()[idx] += g;
    }
    Ok(grad)
}

pub fn relu(input: &Tensor) -> Tensor {
    map(input, |x| x.max(0.0))
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.same_shape(input, "relu backward")?;
    zip(grad_out, input, |g, x| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    map(input, sigmoid_scalar)
}

#[inline]
fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of the sigmoid given its forward *output* `s`.
pub fn sigmoid_backward(grad_out: &Tensor, output: &Tensor) -> Result<Tensor> {
    grad_out.same_shape(output, "sigmoid backward")?;
    zip(grad_out, output, |g, s| g * s * (1.0 - s))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "add")?;
    zip(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "sub")?;
    zip(a, b, |x, y| x - y)
}

pub fn scale(a: &Tensor, factor: f32) -> Tensor {
    map(a, |x| x * factor)
}

/// Mean of `(a − b)²` over every element, accumulated in f64.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.same_shape(b, "mse")?;
    if a.numel() == 0 {
        return Err(Error::dim("mse of empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((sum / a.numel() as f64) as f32)
}

/// Gradient `grad·2(a − b)/N` with respect to `a`; the gradient for `b` is its negation.
pub fn mse_backward(a: &Tensor, b: &Tensor, grad: f32) -> Result<Tensor> {
    a.same_shape(b, "mse backward")?;
    let k = 2.0 * grad / a.numel() as f32;
    zip(a, b, |x, y| k * (x - y))
}

fn map(a: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().map(|&x| f(x)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Six-loop direct convolution in f64.
    fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f64; n * o * oh * ow];
        for ni in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.data()[oc] as f64;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let si = (i * stride + ki) as isize - pad as isize;
                                    let sj = (j * stride + kj) as isize - pad as isize;
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((ni * c + ic) * h + si as usize) * wd + sj as usize];
                                    let wv = w.data()[((oc * c + ic) * k + ki) * k + kj];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((ni * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter-accumulate transposed convolution in f64.
    fn naive_conv_transpose2d(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> (Vec<usize>, Vec<f64>) {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (_, o, k, _) = w.dims4().unwrap();
        let oh = (h - 1) * stride + k + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
        let mut out = vec![0.0f64; n * o * oh * ow];
        for ni in 0..n {
            for oc in 0..o {
                for v in &mut out[(ni * o + oc) * oh * ow..(ni * o + oc + 1) * oh * ow] {
                    *v = b.data()[oc] as f64;
                }
            }
            for ic in 0..c {
                for i in 0..h {
                    for j in 0..wd {
                        let xv = x.data()[((ni * c + ic) * h + i) * wd + j] as f64;
                        for oc in 0..o {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let yi = (i * stride + ki) as isize - pad as isize;
                                    let yj = (j * stride + kj) as isize - pad as isize;
                                    if yi < 0 || yj < 0 || yi >= oh as isize || yj >= ow as isize {
                                        continue;
                                    }
                                    let wv = w.data()[((ic * o + oc) * k + ki) * k + kj] as f64;
                                    out[((ni * o + oc) * oh + yi as usize) * ow + yj as usize] +=
                                        xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        (vec![n, o, oh, ow], out)
    }

    #[test]
    fn conv2d_all_ones_kernel_sums_neighbourhood() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        let oracle = naive_conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1);
        assert_eq!(oracle, vec![10.0; 4]);
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[10.0; 4]);
    }

    #[test]
    fn conv2d_zero_input_and_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
        let out = conv2d_forward(&Tensor::zeros(&[2, 2, 5, 5]), &w, &Tensor::zeros(&[4]), 2, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let x = Tensor::uniform(&[2, 1, 5, 7], -1.0, 1.0, &mut rng);
        let id = conv2d_forward(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(id, x);
    }

    #[test]
    fn conv2d_matches_naive_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (n, c, o, h, w, k, s, p) in [
            (2, 8, 5, 16, 16, 3, 1, 1),
            (1, 3, 4, 9, 7, 3, 2, 1),
            (2, 2, 3, 8, 8, 2, 2, 0),
            (1, 4, 2, 5, 6, 1, 1, 0),
        ] {
            let x = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor::uniform(&[o, c, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[o], -1.0, 1.0, &mut rng);
            let out = conv2d_forward(&x, &wt, &b, s, p).unwrap();
            let oracle = naive_conv2d(&x, &wt, &b, s, p);
            for (a, e) in out.data().iter().zip(&oracle) {
                assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_reports_offending_axes() {
        let err = conv2d_forward(
            &Tensor::zeros(&[1, 3, 4, 4]),
            &Tensor::zeros(&[2, 2, 3, 3]),
            &Tensor::zeros(&[2]),
            1,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("channel axis")), "{err}");
    }

    #[test]
    fn conv_transpose_single_pixel_spreads_over_kernel() {
        let x = t(&[1, 1, 1, 1], &[5.0]);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let out = conv_transpose2d_forward(&x, &w, &b, 2, 0, 0).unwrap();
        let (shape, oracle) = naive_conv_transpose2d(&x, &w, &b, 2, 0, 0);
        assert_eq!(out.shape(), &shape[..]);
        assert_eq!(oracle, vec![5.0; 4]);
        assert_eq!(out.data(), &[5.0; 4]);
    }

    #[test]
    fn conv_transpose_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, c, o, h, w, k, s, p, op) in [
            (2, 3, 4, 4, 4, 2, 2, 0, 0),
            (1, 2, 3, 5, 6, 3, 1, 1, 0),
            (1, 2, 2, 3, 3, 3, 2, 1, 1),
        ] {
            let x = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor::uniform(&[c, o, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[o], -1.0, 1.0, &mut rng);
            let out = conv_transpose2d_forward(&x, &wt, &b, s, p, op).unwrap();
            let (shape, oracle) = naive_conv_transpose2d(&x, &wt, &b, s, p, op);
            assert_eq!(out.shape(), &shape[..]);
            for (a, e) in out.data().iter().zip(&oracle) {
                assert!((*a as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_transpose_stride_one_same_padding_keeps_size() {
        for n in [1, 4, 17] {
            assert_eq!(conv_transpose_output_extent(n, 3, 1, 1, 0), Some(n));
        }
        let out = conv_transpose2d_forward(
            &Tensor::zeros(&[1, 2, 6, 5]),
            &Tensor::full(&[2, 3, 3, 3], 0.5),
            &Tensor::zeros(&[3]),
            1,
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 3, 6, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_transpose_rejects_non_positive_extent() {
        let err = conv_transpose2d_forward(
            &Tensor::zeros(&[1, 1, 1, 1]),
            &Tensor::zeros(&[1, 1, 1, 1]),
            &Tensor::zeros(&[1]),
            1,
            1,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn conv_backward_zero_grad_and_missing_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&Tensor::zeros(&[1, 3, 4, 4]), &ConvSaved::new(&x, &w, 1, 1)).unwrap();
        assert!(g.input.data().iter().chain(g.weight.data()).chain(g.bias.data()).all(|&v| v == 0.0));

        let missing = ConvSaved {
            input: None,
            ..ConvSaved::new(&x, &w, 1, 1)
        };
        assert!(matches!(
            conv2d_backward(&Tensor::zeros(&[1, 3, 4, 4]), &missing),
            Err(Error::State(_))
        ));
        assert!(matches!(
            conv2d_backward(&Tensor::zeros(&[1, 3, 5, 4]), &ConvSaved::new(&x, &w, 1, 1)),
            Err(Error::Dimension(_))
        ));

        let wt = Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let saved = ConvSaved::new(&x, &wt, 2, 0);
        let g = conv_transpose2d_backward(&Tensor::zeros(&[1, 3, 8, 8]), &saved).unwrap();
        assert!(g.input.data().iter().chain(g.weight.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let g_out = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&g_out, &ConvSaved::new(&x, &w, 1, 0)).unwrap();
        assert_eq!(g.input, g_out);
    }

    #[test]
    fn conv_transpose_weight_grad_is_sum_pooled_input() {
        // For all-ones grad_out, dW[ic, oc, ki, kj] = Σ_{i,j} x[ic, i, j]
        // over positions whose scatter target lands inside the output.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 1, 2, 2], -1.0, 1.0, &mut rng);
        let g = conv_transpose2d_backward(&Tensor::full(&[2, 1, 6, 6], 1.0), &ConvSaved::new(&x, &w, 2, 0)).unwrap();
        for ic in 0..2 {
            let mut sum = 0.0f64;
            for n in 0..2 {
                for p in 0..9 {
                    sum += x.data()[(n * 2 + ic) * 9 + p] as f64;
                }
            }
            for tap in 0..4 {
                let got = g.weight.data()[ic * 4 + tap] as f64;
                assert!((got - sum).abs() < 1e-5, "{got} vs {sum}");
            }
        }
        assert_eq!(g.bias.data(), &[72.0]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (out, arg) = maxpool2d_forward(&x).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::full(&[1, 2, 4, 4], 0.3);
        let (out, arg) = maxpool2d_forward(&c).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.3));
        // ties resolve to the top-left element of each window
        assert_eq!(&arg[..4], &[0, 2, 8, 10]);

        assert!(matches!(
            maxpool2d_forward(&Tensor::zeros(&[1, 1, 3, 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let g = maxpool2d_backward(&t(&[1, 1, 1, 1], &[1.0]), &[3], &[1, 1, 2, 2]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
        let g = maxpool2d_backward(&Tensor::zeros(&[1, 1, 1, 1]), &[3], &[1, 1, 2, 2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let pos = t(&[3], &[0.5, 1.0, 7.0]);
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(&Tensor::full(&[3], 1.0), &t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);

        let s = sigmoid(&t(&[3], &[0.0, 100.0, -100.0]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0).abs() <= 1e-7);
        assert!(s.data()[2] >= 0.0 && s.data()[2] < 1e-30);
        assert!(s.is_finite());
    }

    #[test]
    fn mse_values() {
        let a = t(&[2], &[1.0, 0.0]);
        let z = Tensor::zeros(&[2]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a, &z).unwrap(), 0.5);
        assert_eq!(mse_backward(&a, &z, 1.0).unwrap().data(), &[1.0, 0.0]);
        assert!(mse_loss(&a, &Tensor::zeros(&[3])).is_err());
    }
}
