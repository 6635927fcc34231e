use candle_core::{Module, Tensor};
use candle_nn::{GroupNorm, Linear};

use super::conv::{Conv2d, ConvTranspose2d};
use super::params::{Init, Scope};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    /// Variance gain of the fan-in initialiser: 2 ahead of a ReLU, 1 otherwise.
    pub gain: f64,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
            gain: 2.0,
        }
    }
}

impl ConvOpts {
    /// Stride 1 and the padding that keeps the spatial size for kernel `k`.
    pub fn same(k: usize) -> Self {
        Self {
            padding: k / 2,
            ..Self::default()
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

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn linear(mut self) -> Self {
        self.gain = 1.0;
        self
    }
}

pub fn conv2d(s: &Scope, c_in: usize, c_out: usize, k: usize, opts: ConvOpts) -> Result<Conv2d> {
    let weight = s.param(
        "weight",
        (c_out, c_in, k, k),
        Init::FanIn {
            fan_in: c_in * k * k,
            gain: opts.gain,
        },
    )?;
    let bias = if opts.bias {
        Some(s.param("bias", c_out, Init::Zeros)?)
    } else {
        None
    };
    Ok(Conv2d::new(weight, bias, opts.stride, opts.padding, opts.dilation))
}

/// Transposed convolution; the weight layout is `(c_in, c_out, k, k)`.
pub fn conv_transpose2d(
    s: &Scope,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
    bias: bool,
) -> Result<ConvTranspose2d> {
    let weight = s.param(
        "weight",
        (c_in, c_out, k, k),
        Init::FanIn {
            fan_in: c_in * k * k / (stride * stride).max(1),
            gain: 2.0,
        },
    )?;
    let bias = if bias {
        Some(s.param("bias", c_out, Init::Zeros)?)
    } else {
        None
    };
    Ok(ConvTranspose2d::new(weight, bias, stride, padding, output_padding))
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0 && *g <= channels)
        .unwrap_or(1)
}

pub fn group_norm(s: &Scope, channels: usize) -> Result<GroupNorm> {
    let weight = s.param("weight", channels, Init::Ones)?;
    let bias = s.param("bias", channels, Init::Zeros)?;
    Ok(GroupNorm::new(
        weight,
        bias,
        channels,
        groups_for(channels),
        1e-5,
    )?)
}

pub fn linear(s: &Scope, d_in: usize, d_out: usize) -> Result<Linear> {
    let weight = s.param(
        "weight",
        (d_out, d_in),
        Init::FanIn {
            fan_in: d_in,
            gain: 2.0,
        },
    )?;
    let bias = s.param("bias", d_out, Init::Zeros)?;
    Ok(Linear::new(weight, Some(bias)))
}

/// Batch normalisation with fixed statistics and a learnable affine part.
///
/// Statistics live in non-trainable buffers so that pretrained backbones can
/// carry theirs in; freshly built layers start at mean 0, variance 1.
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl FrozenBatchNorm {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", channels, Init::Ones)?,
            bias: s.param("bias", channels, Init::Zeros)?,
            running_mean: s.buffer("running_mean", channels, Init::Zeros)?,
            running_var: s.buffer("running_var", channels, Init::Ones)?,
        })
    }
}

impl Module for FrozenBatchNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = self.weight.dim(0)?;
        let scale = (&self.weight / (&self.running_var + 1e-5)?.sqrt()?)?;
        let shift = (&self.bias - (&self.running_mean * &scale)?)?;
        x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)
    }
}

/// Convolution, optional group normalisation, optional ReLU.
#[derive(Debug, Clone)]
pub struct BasicConv {
    conv: Conv2d,
    norm: Option<GroupNorm>,
    relu: bool,
}

impl BasicConv {
    pub fn new(
        s: &Scope,
        c_in: usize,
        c_out: usize,
        k: usize,
        opts: ConvOpts,
        norm: bool,
        relu: bool,
    ) -> Result<Self> {
        let opts = if relu { opts } else { opts.linear() };
        let opts = if norm { opts.no_bias() } else { opts };
        Ok(Self {
            conv: conv2d(&s.pp("conv"), c_in, c_out, k, opts)?,
            norm: if norm {
                Some(group_norm(&s.pp("norm"), c_out)?)
            } else {
                None
            },
            relu,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }
}

impl Module for BasicConv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = match &self.norm {
            Some(n) => n.forward(&y)?,
            None => y,
        };
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }
}
