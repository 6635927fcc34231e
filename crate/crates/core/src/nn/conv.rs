//! Convolutions as unfold (im2col) followed by a matrix product.
//!
//! candle's CPU backward for `conv2d` and `conv_transpose2d` is an order of
//! magnitude slower than its forward, which made training the toy models
//! impractical. Here both convolutions are expressed through two custom ops,
//! `Unfold` and `Fold`, that are each other's adjoint, so autograd only ever
//! sees unfold, fold and matmul.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor};

use crate::{Error, Result};

/// Geometry shared by an unfold and its adjoint fold.
///
/// The image is `(b, c, h, w)`; the column tensor is `(b, c*k*k, oh*ow)` with
/// row index `(c*k + i)*k + j`, matching a `(o, c, k, k)` weight reshaped to
/// `(o, c*k*k)`. Column position `(y, x)`, tap `(i, j)` reads image pixel
/// `(y*stride + i*dilation - pad, x*stride + j*dilation - pad)`; pixels outside
/// the image read as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Source coordinate of output index `o` and tap `t` along one axis.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + t * self.dilation) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }

    fn unfold<T: Copy + Default>(&self, img: &[T], b: usize) -> Vec<T> {
        let (plane, l) = (self.h * self.w, self.oh * self.ow);
        let mut out = vec![T::default(); b * self.rows() * l];
        for n in 0..b {
            for c in 0..self.c {
                let src = &img[(n * self.c + c) * plane..][..plane];
                for i in 0..self.k {
                    for j in 0..self.k {
                        let row = (n * self.c + c) * self.k * self.k + i * self.k + j;
                        let dst = &mut out[row * l..][..l];
                        for y in 0..self.oh {
                            let Some(sy) = self.src(y, i, self.h) else { continue };
                            let src_row = &src[sy * self.w..][..self.w];
                            let dst_row = &mut dst[y * self.ow..][..self.ow];
                            for (x, d) in dst_row.iter_mut().enumerate() {
                                if let Some(sx) = self.src(x, j, self.w) {
                                    *d = src_row[sx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T], b: usize) -> Vec<T> {
        let (plane, l) = (self.h * self.w, self.oh * self.ow);
        let mut out = vec![T::default(); b * self.c * plane];
        for n in 0..b {
            for c in 0..self.c {
                let dst = &mut out[(n * self.c + c) * plane..][..plane];
                for i in 0..self.k {
                    for j in 0..self.k {
                        let row = (n * self.c + c) * self.k * self.k + i * self.k + j;
                        let src = &cols[row * l..][..l];
                        for y in 0..self.oh {
                            let Some(sy) = self.src(y, i, self.h) else { continue };
                            let dst_row = &mut dst[sy * self.w..][..self.w];
                            let src_row = &src[y * self.ow..][..self.ow];
                            for (x, &v) in src_row.iter().enumerate() {
                                if let Some(sx) = self.src(x, j, self.w) {
                                    dst_row[sx] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("unfold/fold expects a contiguous input"),
    }
}

struct Unfold(Geometry);
struct Fold(Geometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (b, c, h, w) = layout.shape().dims4()?;
        if (c, h, w) != (g.c, g.h, g.w) {
            candle_core::bail!("unfold: input {:?} does not match geometry {g:?}", layout.dims());
        }
        let shape = Shape::from((b, g.rows(), g.oh * g.ow));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(g.unfold(contiguous(d, layout)?, b)),
            CpuStorage::F64(d) => CpuStorage::F64(g.unfold(contiguous(d, layout)?, b)),
            other => candle_core::bail!("unfold: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (b, rows, l) = layout.shape().dims3()?;
        if (rows, l) != (g.rows(), g.oh * g.ow) {
            candle_core::bail!("fold: input {:?} does not match geometry {g:?}", layout.dims());
        }
        let shape = Shape::from((b, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(g.fold(contiguous(d, layout)?, b)),
            CpuStorage::F64(d) => CpuStorage::F64(g.fold(contiguous(d, layout)?, b)),
            other => candle_core::bail!("fold: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    if n + 2 * pad < span {
        return Err(Error::Shape(format!("input side {n} too small for kernel span {span} with padding {pad}")));
    }
    Ok((n + 2 * pad - span) / stride + 1)
}

fn add_bias(y: Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
    match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?),
        None => Ok(y),
    }
}

/// 2-D convolution with square kernels; weight layout `(c_out, c_in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
            dilation,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn try_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (o, ci, k, _) = self.weight.dims4()?;
        if c != ci {
            return Err(Error::Shape(format!("conv expects {ci} input channels, got {c}")));
        }
        let geo = Geometry {
            c,
            h,
            w,
            k,
            stride: self.stride,
            pad: self.padding,
            dilation: self.dilation,
            oh: conv_out(h, k, self.stride, self.padding, self.dilation)?,
            ow: conv_out(w, k, self.stride, self.padding, self.dilation)?,
        };
        let cols = if k == 1 && self.stride == 1 && self.padding == 0 {
            // the unfold of a 1x1 convolution is the identity
            x.reshape((b, c, h * w))?
        } else {
            x.contiguous()?.apply_op1(Unfold(geo))?
        };
        let y = self.weight.reshape((o, geo.rows()))?.broadcast_matmul(&cols)?;
        Ok(add_bias(y.reshape((b, o, geo.oh, geo.ow))?, self.bias.as_ref())?)
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.try_forward(x).map_err(candle_core::Error::wrap)
    }
}

/// Transposed convolution; weight layout `(c_in, c_out, k, k)`. The output
/// side is `(n - 1) * stride - 2 * padding + k + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize, output_padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn try_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (ci, o, k, _) = self.weight.dims4()?;
        if c != ci {
            return Err(Error::Shape(format!("transposed conv expects {ci} input channels, got {c}")));
        }
        let side = |n: usize| {
            ((n - 1) * self.stride + k + self.output_padding)
                .checked_sub(2 * self.padding)
                .ok_or_else(|| Error::Shape(format!("transposed conv output would be empty for side {n}")))
        };
        let geo = Geometry {
            c: o,
            h: side(h)?,
            w: side(w)?,
            k,
            stride: self.stride,
            pad: self.padding,
            dilation: 1,
            oh: h,
            ow: w,
        };
        let wt = self.weight.reshape((c, geo.rows()))?.t()?.contiguous()?;
        let cols = wt.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        let y = cols.contiguous()?.apply_op1(Fold(geo))?;
        Ok(add_bias(y, self.bias.as_ref())?)
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.try_forward(x).map_err(candle_core::Error::wrap)
    }
}
