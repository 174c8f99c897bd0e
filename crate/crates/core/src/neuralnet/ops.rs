//! Forward and backward kernels for every layer type in the network.
//!
//! Convolutions are lowered to matrix products through `im2col`/`col2im`
//! over tiles of output rows, so the scratch buffer stays bounded for large
//! images. Backward functions accumulate parameter gradients into caller
//! buffers and return the input gradient.

use std::ops::Range;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imageio::bilinear_taps;

/// Upper bound on the number of floats in one im2col tile.
const TILE_BUDGET: usize = 1 << 22;

pub const BN_EPSILON: f32 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major view with explicit strides, for the GEMM wrapper.
#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    fn new(data: &'a [f32], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "matrix view out of bounds");
        }
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c = a * b + beta * c` where `c` is `a.rows x b.cols` with strides `(rsc, csc)`.
fn gemm(a: MatRef, b: MatRef, beta: f32, c: &mut [f32], rsc: usize, csc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "output view out of bounds");
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: every index touched by the kernel was bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// `(input + 2 pad - kernel) / stride + 1`, which must be integral.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel || (padded - self.kernel) % self.stride != 0 {
            return Err(Error::Config(format!(
                "kernel {} stride {} pad {} does not tile an input of {input}",
                self.kernel, self.stride, self.pad
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Spatial size produced by the transposed convolution.
    pub fn transposed_output_size(&self, input: usize) -> Result<usize> {
        let full = (input - 1) * self.stride + self.kernel;
        if full < 2 * self.pad + 1 {
            return Err(Error::Config(format!("transposed conv collapses input {input}")));
        }
        Ok(full - 2 * self.pad)
    }

    fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }
}

/// Unfolds output rows `rows` of a `(c, h, w)` image into a
/// `(c * k * k, rows.len() * ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f32],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    ow: usize,
    rows: Range<usize>,
    cols: &mut [f32],
) {
    let k = g.kernel;
    let t = rows.len() * ow;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut cols[r * t..(r + 1) * t];
                for (i, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[i * ow..(i + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into the image.
fn col2im(
    cols: &[f32],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    ow: usize,
    rows: Range<usize>,
    img: &mut [f32],
) {
    let k = g.kernel;
    let t = rows.len() * ow;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &cols[r * t..(r + 1) * t];
                for (i, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[i * ow..(i + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn row_tiles(total_rows: usize, row_len: usize, patch_len: usize) -> impl Iterator<Item = Range<usize>> {
    let per_tile = (TILE_BUDGET / (patch_len * row_len).max(1)).clamp(1, total_rows.max(1));
    (0..total_rows)
        .step_by(per_tile)
        .map(move |r0| r0..(r0 + per_tile).min(total_rows))
}

fn add_bias(out: &mut Tensor, bias: &[f32]) {
    let (n, c) = (out.batch(), out.channels());
    for b in 0..n {
        for (co, &bv) in bias.iter().enumerate().take(c) {
            out.plane_mut(b, co).iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn accumulate_bias_grad(grad_out: &Tensor, db: &mut [f32]) {
    for b in 0..grad_out.batch() {
        for (co, d) in db.iter_mut().enumerate() {
            *d += grad_out.plane(b, co).iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
}

/// Cross-correlation with weights laid out `(cout, cin, k, k)`.
pub fn conv2d_forward(x: &Tensor, weight: &[f32], bias: &[f32], g: ConvGeometry) -> Result<Tensor> {
    let [n, cin, h, w] = x.shape();
    let patch = g.patch_len(cin);
    if weight.len() % patch != 0 || weight.len() / patch != bias.len() {
        return Err(Error::Config(format!(
            "conv weight of {} values does not match {cin} input channels and {} outputs",
            weight.len(),
            bias.len()
        )));
    }
    let cout = bias.len();
    let (oh, ow) = (g.output_size(h)?, g.output_size(w)?);
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let wmat = MatRef::new(weight, cout, patch, patch, 1);
    let mut cols = Vec::new();
    for b in 0..n {
        let img = x.item(b);
        let dst = out.item_mut(b);
        for rows in row_tiles(oh, ow, patch) {
            let t = rows.len() * ow;
            cols.resize(patch * t, 0.0);
            im2col(img, (cin, h, w), g, ow, rows.clone(), &mut cols);
            let colm = MatRef::new(&cols, patch, t, t, 1);
            gemm(wmat, colm, 0.0, &mut dst[rows.start * ow..], oh * ow, 1);
        }
    }
    add_bias(&mut out, bias);
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f32],
    grad_out: &Tensor,
    g: ConvGeometry,
    dweight: &mut [f32],
    dbias: &mut [f32],
    want_input: bool,
) -> Option<Tensor> {
    let [n, cin, h, w] = x.shape();
    let [_, cout, oh, ow] = grad_out.shape();
    let patch = g.patch_len(cin);
    assert_eq!(weight.len(), cout * patch);
    assert_eq!(dweight.len(), weight.len());
    let mut dx = want_input.then(|| Tensor::zeros(x.shape()));
    let wt = MatRef::new(weight, patch, cout, 1, patch);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for b in 0..n {
        let img = x.item(b);
        let dy = grad_out.item(b);
        for rows in row_tiles(oh, ow, patch) {
            let t = rows.len() * ow;
            let dy_tile = MatRef::new(&dy[rows.start * ow..], cout, t, oh * ow, 1);
            cols.resize(patch * t, 0.0);
            im2col(img, (cin, h, w), g, ow, rows.clone(), &mut cols);
            // dW += dY * cols^T
            gemm(dy_tile, MatRef::new(&cols, t, patch, 1, t), 1.0, dweight, patch, 1);
            if let Some(dx) = dx.as_mut() {
                dcols.resize(patch * t, 0.0);
                gemm(wt, dy_tile, 0.0, &mut dcols, t, 1);
                col2im(&dcols, (cin, h, w), g, ow, rows, dx.item_mut(b));
            }
        }
    }
    accumulate_bias_grad(grad_out, dbias);
    dx
}

/// Transposed convolution with weights laid out `(cin, cout, k, k)`; the
/// adjoint of [`conv2d_forward`] with the same geometry, plus bias.
pub fn conv_transpose2d_forward(x: &Tensor, weight: &[f32], bias: &[f32], g: ConvGeometry) -> Result<Tensor> {
    let [n, cin, h, w] = x.shape();
    let cout = bias.len();
    let patch = g.patch_len(cout);
    if weight.len() != cin * patch {
        return Err(Error::Config(format!(
            "transposed conv weight of {} values does not match {cin}->{cout}",
            weight.len()
        )));
    }
    let (oh, ow) = (g.transposed_output_size(h)?, g.transposed_output_size(w)?);
    // The forward convolution from the output grid must land back on the input grid.
    if g.output_size(oh)? != h || g.output_size(ow)? != w {
        return Err(Error::Config("transposed conv geometry is not invertible".into()));
    }
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let wt = MatRef::new(weight, patch, cin, 1, patch);
    let mut cols = Vec::new();
    for b in 0..n {
        let img = x.item(b);
        for rows in row_tiles(h, w, patch) {
            let t = rows.len() * w;
            cols.resize(patch * t, 0.0);
            gemm(wt, MatRef::new(&img[rows.start * w..], cin, t, h * w, 1), 0.0, &mut cols, t, 1);
            col2im(&cols, (cout, oh, ow), g, w, rows, out.item_mut(b));
        }
    }
    add_bias(&mut out, bias);
    out.debug_check_finite("conv_transpose2d");
    Ok(out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &[f32],
    grad_out: &Tensor,
    g: ConvGeometry,
    dweight: &mut [f32],
    dbias: &mut [f32],
    want_input: bool,
) -> Option<Tensor> {
    let [n, cin, h, w] = x.shape();
    let [_, cout, oh, ow] = grad_out.shape();
    let patch = g.patch_len(cout);
    assert_eq!(weight.len(), cin * patch);
    let mut dx = want_input.then(|| Tensor::zeros(x.shape()));
    let wmat = MatRef::new(weight, cin, patch, patch, 1);
    let mut dcols = Vec::new();
    for b in 0..n {
        let img = x.item(b);
        let dy = grad_out.item(b);
        for rows in row_tiles(h, w, patch) {
            let t = rows.len() * w;
            dcols.resize(patch * t, 0.0);
            im2col(dy, (cout, oh, ow), g, w, rows.clone(), &mut dcols);
            let dcol = MatRef::new(&dcols, patch, t, t, 1);
            // dW += X_tile * dcols^T
            let x_tile = MatRef::new(&img[rows.start * w..], cin, t, h * w, 1);
            gemm(x_tile, MatRef::new(&dcols, t, patch, 1, t), 1.0, dweight, patch, 1);
            if let Some(dx) = dx.as_mut() {
                gemm(wmat, dcol, 0.0, &mut dx.item_mut(b)[rows.start * w..], h * w, 1);
            }
        }
    }
    accumulate_bias_grad(grad_out, dbias);
    dx
}

/// Saved normalization state needed by [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mode: Mode,
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Per-channel batch normalization. In training mode the batch statistics
/// are used and folded into the running estimates (unbiased variance).
pub fn batchnorm_forward(
    x: &Tensor,
    scale: &[f32],
    shift: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
    mode: Mode,
) -> Result<(Tensor, BnCache)> {
    let [n, c, _, _] = x.shape();
    if scale.len() != c || shift.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Config(format!(
            "batch norm over {c} channels given {} parameters",
            scale.len()
        )));
    }
    let m = n * x.plane_len();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f64;
                for b in 0..n {
                    sum += x.plane(b, ch).iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    sq += x.plane(b, ch).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m as f64;
                let unbiased = if m > 1 { sq / (m - 1) as f64 } else { var };
                running_mean[ch] = BN_MOMENTUM * running_mean[ch] + (1.0 - BN_MOMENTUM) * mean as f32;
                running_var[ch] = BN_MOMENTUM * running_var[ch] + (1.0 - BN_MOMENTUM) * unbiased as f32;
                (mean as f32, var as f32)
            }
            Mode::Eval => (running_mean[ch], running_var[ch]),
        };
        let istd = 1.0 / (var + BN_EPSILON).sqrt();
        inv_std[ch] = istd;
        for b in 0..n {
            let src = x.plane(b, ch);
            let xh = xhat.plane_mut(b, ch);
            for (d, &s) in xh.iter_mut().zip(src) {
                *d = (s - mean) * istd;
            }
            let xh = xhat.plane(b, ch).to_vec();
            for (o, v) in out.plane_mut(b, ch).iter_mut().zip(xh) {
                *o = scale[ch] * v + shift[ch];
            }
        }
    }
    out.debug_check_finite("batchnorm");
    Ok((out, BnCache { mode, xhat, inv_std }))
}

pub fn batchnorm_backward(
    grad_out: &Tensor,
    scale: &[f32],
    cache: &BnCache,
    dscale: &mut [f32],
    dshift: &mut [f32],
) -> Tensor {
    let [n, c, _, _] = grad_out.shape();
    let m = (n * grad_out.plane_len()) as f64;
    let mut dx = Tensor::zeros(grad_out.shape());
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            for (&dy, &xh) in grad_out.plane(b, ch).iter().zip(cache.xhat.plane(b, ch)) {
                sum_dy += dy as f64;
                sum_dy_xhat += dy as f64 * xh as f64;
            }
        }
        dshift[ch] += sum_dy as f32;
        dscale[ch] += sum_dy_xhat as f32;
        let k = scale[ch] as f64 * cache.inv_std[ch] as f64;
        for b in 0..n {
            let dy = grad_out.plane(b, ch);
            let xh = cache.xhat.plane(b, ch);
            let out = dx.plane_mut(b, ch);
            match cache.mode {
                Mode::Train => {
                    for i in 0..out.len() {
                        out[i] = (k * (dy[i] as f64 - sum_dy / m - xh[i] as f64 * sum_dy_xhat / m)) as f32;
                    }
                }
                Mode::Eval => {
                    for i in 0..out.len() {
                        out[i] = (k * dy[i] as f64) as f32;
                    }
                }
            }
        }
    }
    dx
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward(grad_out: &Tensor, output: &Tensor) -> Tensor {
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad_out.shape(), data).expect("same shape")
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of the maximum (first in scan order on ties).
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("max pooling needs even dimensions, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.data_mut()[o] = data[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2x2_backward(grad_out: &Tensor, argmax: &[u32], input_shape: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i as usize] += g;
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Config(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(grad: &Tensor, first: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = grad.shape();
    let split = first * h * w;
    let mut a = Vec::with_capacity(n * split);
    let mut b = Vec::with_capacity(grad.len() - n * split);
    for i in 0..n {
        let item = grad.item(i);
        a.extend_from_slice(&item[..split]);
        b.extend_from_slice(&item[split..]);
    }
    (
        Tensor::from_vec([n, first, h, w], a).expect("shape"),
        Tensor::from_vec([n, c - first, h, w], b).expect("shape"),
    )
}

/// Replicates an `(n, c, 1, 1)` feature over an `h x w` grid.
pub fn broadcast_spatial(g: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, gh, gw] = g.shape();
    assert_eq!((gh, gw), (1, 1), "broadcast source must be 1x1");
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let v = g.at(b, ch, 0, 0);
            out.plane_mut(b, ch).iter_mut().for_each(|o| *o = v);
        }
    }
    out
}

/// Adjoint of [`broadcast_spatial`]: sums each plane.
pub fn broadcast_spatial_backward(grad: &Tensor) -> Tensor {
    let [n, c, _, _] = grad.shape();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            out.data_mut()[b * c + ch] = grad.plane(b, ch).iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
    out
}

/// Per-plane bilinear resize with half-pixel centres (no gradient).
pub fn resize_bilinear_tensor(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch).to_vec();
            let dst = out.plane_mut(b, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
    }
    out
}
