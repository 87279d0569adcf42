//! Forward and backward kernels on plain tensors.
//!
//! Each kernel is a pure function; [`super::Tape`] records which ones ran and
//! chains their backward rules. Loops accumulate in a fixed order so results
//! are bitwise reproducible.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Padding that keeps the spatial extent at stride 1 (odd kernels).
    pub fn same_padding(mut self) -> Self {
        self.padding = self.dilation * (self.kernel_size - 1) / 2;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_size == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::invalid(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    fn out_extent(&self, size: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel_size - 1) + 1;
        let padded = size + 2 * self.padding;
        if padded < span {
            return Err(Error::invalid(format!(
                "convolution output would be empty: input extent {size}, padding {}, receptive span {span}",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output (height, width) for an input of the given extents.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        Ok((self.out_extent(height)?, self.out_extent(width)?))
    }

    /// Range of output indices whose tap `offset` (= k·dilation) lands inside `[0, size)`.
    fn valid_outputs(&self, offset: usize, size: usize, out: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let p = self.padding as isize;
        let off = offset as isize;
        // need 0 <= o*s + off - p <= size - 1
        let lo = (p - off).max(0);
        let lo = (lo + s - 1) / s;
        let hi = size as isize - 1 + p - off;
        if hi < 0 {
            return 0..0;
        }
        let hi = (hi / s + 1).min(out as isize);
        if lo >= hi {
            0..0
        } else {
            lo as usize..hi as usize
        }
    }
}

fn check_conv(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<[usize; 6]> {
    spec.validate()?;
    let [b, c, h, w] = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::invalid(format!(
            "input has {c} channels but the convolution expects {}",
            spec.in_channels
        )));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::invalid(format!(
            "weight shape {:?} does not match {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::invalid(format!(
            "bias shape {:?} does not match [{}]",
            bias.shape(),
            spec.out_channels
        )));
    }
    let (ho, wo) = spec.output_size(h, w)?;
    Ok([b, c, h, w, ho, wo])
}

/// Unfolds one (C, H, W) plane stack into a (C·K·K, Ho·Wo) patch matrix.
fn im2col(x: &[f64], spec: &ConvSpec, h: usize, w: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = spec.kernel_size;
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding);
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..spec.in_channels {
        let plane = &x[c * h * w..][..h * w];
        for kh in 0..k {
            let rows = spec.valid_outputs(kh * d, h, ho);
            for kw in 0..k {
                let cs = spec.valid_outputs(kw * d, w, wo);
                let dst = &mut cols[((c * k + kh) * k + kw) * ho * wo..][..ho * wo];
                for oh in rows.clone() {
                    let src = &plane[(oh * s + kh * d - p) * w..][..w];
                    let drow = &mut dst[oh * wo..][..wo];
                    for ow in cs.clone() {
                        drow[ow] = src[ow * s + kw * d - p];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto the planes.
fn col2im(cols: &[f64], spec: &ConvSpec, h: usize, w: usize, ho: usize, wo: usize, x: &mut [f64]) {
    let k = spec.kernel_size;
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding);
    for c in 0..spec.in_channels {
        let plane = &mut x[c * h * w..][..h * w];
        for kh in 0..k {
            let rows = spec.valid_outputs(kh * d, h, ho);
            for kw in 0..k {
                let cs = spec.valid_outputs(kw * d, w, wo);
                let src = &cols[((c * k + kh) * k + kw) * ho * wo..][..ho * wo];
                for oh in rows.clone() {
                    let drow = &mut plane[(oh * s + kh * d - p) * w..][..w];
                    let srow = &src[oh * wo..][..wo];
                    for ow in cs.clone() {
                        drow[ow * s + kw * d - p] += srow[ow];
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha·op(a)·op(b) + beta·c` with `a` m×k and `b` k×n after
/// optional transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: strides describe dense row-major buffers whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
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

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel_size == 1 && spec.stride == 1 && spec.padding == 0
}

/// Dilated, strided, zero-padded cross-correlation (im2col + GEMM).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let [b, ci, h, w, ho, wo] = check_conv(x, weight, bias, spec)?;
    let co = spec.out_channels;
    let patch = ci * spec.kernel_size * spec.kernel_size;
    let mut out = vec![0.0; b * co * ho * wo];
    let mut cols = vec![0.0; if is_pointwise(spec) { 0 } else { patch * ho * wo }];
    for bi in 0..b {
        let xb = &x.data()[bi * ci * h * w..][..ci * h * w];
        let ob = &mut out[bi * co * ho * wo..][..co * ho * wo];
        for (o, plane) in ob.chunks_mut(ho * wo).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias.data()[o]);
        }
        let patches: &[f64] = if is_pointwise(spec) {
            xb
        } else {
            im2col(xb, spec, h, w, ho, wo, &mut cols);
            &cols
        };
        gemm(co, patch, ho * wo, weight.data(), false, patches, false, 1.0, ob);
    }
    Tensor::new(vec![b, co, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let [b, ci, h, w, ho, wo] = check_conv(x, weight, bias, spec)?;
    let co = spec.out_channels;
    if grad_out.len() != b * co * ho * wo {
        return Err(Error::invalid("conv2d upstream gradient has the wrong size"));
    }
    let patch = ci * spec.kernel_size * spec.kernel_size;
    let pointwise = is_pointwise(spec);
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; weight.numel()];
    let mut cols = vec![0.0; if pointwise { 0 } else { patch * ho * wo }];
    let mut gcols = vec![0.0; if pointwise { 0 } else { patch * ho * wo }];
    for bi in 0..b {
        let xb = &x.data()[bi * ci * h * w..][..ci * h * w];
        let gy = &grad_out[bi * co * ho * wo..][..co * ho * wo];
        let gxb = &mut gx[bi * ci * h * w..][..ci * h * w];
        if pointwise {
            gemm(co, ho * wo, patch, gy, false, xb, true, 1.0, &mut gw);
            gemm(patch, co, ho * wo, weight.data(), true, gy, false, 0.0, gxb);
        } else {
            im2col(xb, spec, h, w, ho, wo, &mut cols);
            gemm(co, ho * wo, patch, gy, false, &cols, true, 1.0, &mut gw);
            gemm(patch, co, ho * wo, weight.data(), true, gy, false, 0.0, &mut gcols);
            col2im(&gcols, spec, h, w, ho, wo, gxb);
        }
    }
    let mut gb = vec![0.0; co];
    for (o, g) in gb.iter_mut().enumerate() {
        for bi in 0..b {
            *g += grad_out[(bi * co + o) * ho * wo..][..ho * wo].iter().sum::<f64>();
        }
    }
    Ok((gx, gw, gb))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0))
}

/// Subgradient 0 at x == 0.
pub fn relu_backward(x: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| sigmoid_scalar(x.data()[i]))
}

/// Backward of sigmoid given its forward output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    y.data()
        .iter()
        .zip(grad_out)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect()
}

/// Source index pair and blend weight for one output coordinate of an
/// align-corners-false bilinear resize.
fn bilinear_taps(out: usize, input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::invalid("upsampling factor must be at least 1"));
    }
    let [b, c, h, w] = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let rows = bilinear_taps(oh, h, factor);
    let cols = bilinear_taps(ow, w, factor);
    let mut out = vec![0.0; b * c * oh * ow];
    for (plane, oplane) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for (r, &(r0, r1, lr)) in rows.iter().enumerate() {
            for (q, &(c0, c1, lc)) in cols.iter().enumerate() {
                let top = plane[r0 * w + c0] * (1.0 - lc) + plane[r0 * w + c1] * lc;
                let bot = plane[r1 * w + c0] * (1.0 - lc) + plane[r1 * w + c1] * lc;
                oplane[r * ow + q] = top * (1.0 - lr) + bot * lr;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// Transpose of the interpolation map applied by [`bilinear_upsample`].
pub fn bilinear_upsample_backward(input_shape: &[usize], factor: usize, grad_out: &[f64]) -> Vec<f64> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let rows = bilinear_taps(oh, h, factor);
    let cols = bilinear_taps(ow, w, factor);
    let numel: usize = input_shape.iter().product();
    let mut gx = vec![0.0; numel];
    for (gplane, gy) in gx.chunks_mut(h * w).zip(grad_out.chunks(oh * ow)) {
        for (r, &(r0, r1, lr)) in rows.iter().enumerate() {
            for (q, &(c0, c1, lc)) in cols.iter().enumerate() {
                let g = gy[r * ow + q];
                gplane[r0 * w + c0] += g * (1.0 - lr) * (1.0 - lc);
                gplane[r0 * w + c1] += g * (1.0 - lr) * lc;
                gplane[r1 * w + c0] += g * lr * (1.0 - lc);
                gplane[r1 * w + c1] += g * lr * lc;
            }
        }
    }
    gx
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    let n = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
    Tensor::new(vec![b, c, 1, 1], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let hw = input_shape[2] * input_shape[3];
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat(g / hw as f64).take(hw))
        .collect()
}

/// Repeats a (B, C, 1, 1) tensor over an H×W grid.
pub fn broadcast_spatial(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if h != 1 || w != 1 || height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "broadcast needs a 1×1 input and positive target, got {h}×{w} → {height}×{width}"
        )));
    }
    let data = x
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(height * width))
        .collect();
    Tensor::new(vec![b, c, height, width], data)
}

pub fn broadcast_spatial_backward(grad_out: &[f64], height: usize, width: usize) -> Vec<f64> {
    grad_out.chunks(height * width).map(|p| p.iter().sum()).collect()
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let [b, _, h, w] = first.dims4()?;
    let mut total_c = 0;
    for x in xs {
        let [xb, xc, xh, xw] = x.dims4()?;
        if (xb, xh, xw) != (b, h, w) {
            return Err(Error::invalid(format!(
                "concat operands disagree: {:?} vs {:?}",
                first.shape(),
                x.shape()
            )));
        }
        total_c += xc;
    }
    let mut out = Vec::with_capacity(b * total_c * h * w);
    for bi in 0..b {
        for x in xs {
            let per = x.shape()[1] * h * w;
            out.extend_from_slice(&x.data()[bi * per..][..per]);
        }
    }
    Tensor::new(vec![b, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-operand pieces.
pub fn split_channels(shapes: &[&[usize]], grad_out: &[f64]) -> Vec<Vec<f64>> {
    let b = shapes[0][0];
    let hw = shapes[0][2] * shapes[0][3];
    let mut parts: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut cursor = 0;
    for _ in 0..b {
        for (part, s) in parts.iter_mut().zip(shapes) {
            let per = s[1] * hw;
            part.extend_from_slice(&grad_out[cursor..cursor + per]);
            cursor += per;
        }
    }
    parts
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::invalid(format!(
            "add of mismatched shapes {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i]))
}

/// Removes `k` pixels from every side of a (B, C, H, W) tensor.
pub fn crop_core(x: &Tensor, k: usize) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if h < 2 * k + 1 || w < 2 * k + 1 {
        return Err(Error::invalid(format!(
            "cannot crop {k} pixels per side from a {h}×{w} map"
        )));
    }
    let (ch, cw) = (h - 2 * k, w - 2 * k);
    let mut out = Vec::with_capacity(b * c * ch * cw);
    for plane in x.data().chunks(h * w) {
        for r in k..k + ch {
            out.extend_from_slice(&plane[r * w + k..][..cw]);
        }
    }
    Tensor::new(vec![b, c, ch, cw], out)
}

pub fn crop_core_backward(input_shape: &[usize], k: usize, grad_out: &[f64]) -> Vec<f64> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ch, cw) = (h - 2 * k, w - 2 * k);
    let numel: usize = input_shape.iter().product();
    let mut gx = vec![0.0; numel];
    for (gplane, gy) in gx.chunks_mut(h * w).zip(grad_out.chunks(ch * cw)) {
        for r in 0..ch {
            gplane[(r + k) * w + k..][..cw].copy_from_slice(&gy[r * cw..][..cw]);
        }
    }
    gx
}

/// α-balanced focal loss constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!("focal alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check_focal(logits: &Tensor, target: &Tensor, params: &FocalParams) -> Result<()> {
    params.validate()?;
    if logits.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "logits {:?} and target {:?} differ in shape",
            logits.shape(),
            target.shape()
        )));
    }
    if let Some(v) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!("focal loss target must be binary, found {v}")));
    }
    Ok(())
}

/// Mean over pixels of `-α_t (1 - p_t)^γ ln p_t`, evaluated from logits.
///
/// With `s = ±logit` signed toward the true class, `p_t = σ(s)`,
/// `1 - p_t = σ(-s)` and `-ln p_t = softplus(-s)`.
pub fn focal_loss(logits: &Tensor, target: &Tensor, params: &FocalParams) -> Result<f64> {
    check_focal(logits, target, params)?;
    let n = logits.numel() as f64;
    let sum: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| {
            let (s, alpha_t) = if t == 1.0 {
                (z, params.alpha)
            } else {
                (-z, 1.0 - params.alpha)
            };
            let q = sigmoid_scalar(-s);
            alpha_t * q.powf(params.gamma) * softplus(-s)
        })
        .sum();
    Ok(sum / n)
}

pub fn focal_loss_backward(logits: &Tensor, target: &Tensor, params: &FocalParams) -> Result<Vec<f64>> {
    check_focal(logits, target, params)?;
    let n = logits.numel() as f64;
    Ok(logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| {
            let (s, alpha_t, sign) = if t == 1.0 {
                (z, params.alpha, 1.0)
            } else {
                (-z, 1.0 - params.alpha, -1.0)
            };
            let q = sigmoid_scalar(-s);
            let p = sigmoid_scalar(s);
            // d/ds [α q^γ softplus(-s)] = -α q^γ (γ p softplus(-s) + q)
            let d_ds = -alpha_t * q.powf(params.gamma) * (params.gamma * p * softplus(-s) + q);
            sign * d_ds / n
        })
        .collect())
}
