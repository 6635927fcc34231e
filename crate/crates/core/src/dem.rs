//! Depth-enhanced fusion: each depth side-out passes through channel then
//! spatial attention (both driven by global max pooling only) and is added to
//! the RGB side-out of the same level.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, Modality, NUM_LEVELS};
use crate::nn::{conv2d, linear, sigmoid, Conv2d, ConvOpts, Scope};
use crate::{Error, Result};

/// Squashing applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Sigmoid,
    /// Raw attention values, no squashing.
    None,
}

impl Gate {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Gate::Sigmoid => sigmoid(x),
            Gate::None => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemConfig {
    pub channel_attention: bool,
    pub spatial_attention: bool,
    pub ratio: usize,
    pub spatial_kernel: usize,
    pub gate: Gate,
}

impl Default for DemConfig {
    fn default() -> Self {
        Self {
            channel_attention: true,
            spatial_attention: true,
            ratio: 16,
            spatial_kernel: 7,
            gate: Gate::Sigmoid,
        }
    }
}

/// Two-layer perceptron over the per-channel maxima.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(s: &Scope, channels: usize, ratio: usize) -> Result<Self> {
        let hidden = (channels / ratio.max(1)).max(1);
        Ok(Self {
            fc1: linear(&s.pp("fc1"), channels, hidden)?,
            fc2: linear(&s.pp("fc2"), hidden, channels)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Single convolution over the channel-wise maximum map.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(s: &Scope, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv: conv2d(&s.pp("conv"), 1, 1, kernel, ConvOpts::same(kernel).linear())?,
        })
    }
}

/// Attention parameters of one pyramid level.
#[derive(Debug, Clone)]
pub struct DemParams {
    pub channel: Option<ChannelAttention>,
    pub spatial: Option<SpatialAttention>,
    pub gate: Gate,
}

impl DemParams {
    pub fn new(s: &Scope, channels: usize, cfg: &DemConfig) -> Result<Self> {
        Ok(Self {
            channel: if cfg.channel_attention {
                Some(ChannelAttention::new(&s.pp("channel"), channels, cfg.ratio)?)
            } else {
                None
            },
            spatial: if cfg.spatial_attention {
                Some(SpatialAttention::new(&s.pp("spatial"), cfg.spatial_kernel)?)
            } else {
                None
            },
            gate: cfg.gate,
        })
    }
}

/// `gate(M(P_max(f))) * f`, broadcast over the spatial axes.
pub fn channel_attention(f: &Tensor, att: &ChannelAttention, gate: Gate) -> Result<Tensor> {
    let (b, c, _, _) = f.dims4()?;
    if c != att.channels {
        return Err(Error::Shape(format!(
            "channel attention built for {} channels, input has {c}",
            att.channels
        )));
    }
    let pooled = f.flatten_from(2)?.max(2)?;
    let hidden = att.fc1.forward(&pooled)?.relu()?;
    let weights = gate.apply(&att.fc2.forward(&hidden)?)?;
    Ok(f.broadcast_mul(&weights.reshape((b, c, 1, 1))?)?)
}

/// `gate(Conv(R_max(f))) * f`, broadcast over channels.
pub fn spatial_attention(f: &Tensor, att: &SpatialAttention, gate: Gate) -> Result<Tensor> {
    let pooled = f.max_keepdim(1)?;
    let weights = gate.apply(&att.conv.forward(&pooled)?)?;
    Ok(f.broadcast_mul(&weights)?)
}

/// Channel attention followed by spatial attention; disabled parts are identity.
pub fn dem_enhance(f_d: &Tensor, p: &DemParams) -> Result<Tensor> {
    let x = match &p.channel {
        Some(ca) => channel_attention(f_d, ca, p.gate)?,
        None => f_d.clone(),
    };
    match &p.spatial {
        Some(sa) => spatial_attention(&x, sa, p.gate),
        None => Ok(x),
    }
}

/// Cross-modal feature `f_rgb + dem_enhance(f_d)`.
pub fn fuse_modalities(f_rgb: &Tensor, f_d: &Tensor, p: &DemParams) -> Result<Tensor> {
    if f_rgb.dims() != f_d.dims() {
        return Err(Error::Shape(format!(
            "rgb feature {:?} vs depth feature {:?}",
            f_rgb.dims(),
            f_d.dims()
        )));
    }
    Ok((f_rgb + dem_enhance(f_d, p)?)?)
}

/// One independent [`DemParams`] per level.
#[derive(Debug, Clone)]
pub struct Dem {
    pub levels: Vec<DemParams>,
}

impl Dem {
    pub fn new(s: &Scope, channels: [usize; NUM_LEVELS], cfg: &DemConfig) -> Result<Self> {
        let levels = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| DemParams::new(&s.pp(format!("level{}", i + 1)), c, cfg))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn enhance(&self, depth: &FeaturePyramid) -> Result<Vec<Tensor>> {
        depth
            .levels
            .iter()
            .zip(&self.levels)
            .map(|(f, p)| dem_enhance(f, p))
            .collect()
    }

    pub fn fuse(&self, rgb: &FeaturePyramid, depth: &FeaturePyramid) -> Result<FeaturePyramid> {
        let levels = rgb
            .levels
            .iter()
            .zip(&depth.levels)
            .zip(&self.levels)
            .map(|((r, d), p)| fuse_modalities(r, d, p))
            .collect::<Result<Vec<_>>>()?;
        FeaturePyramid::new(levels, Modality::Cross)
    }
}
