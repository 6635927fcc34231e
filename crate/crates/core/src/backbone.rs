//! Five-level feature extraction for both modalities.
//!
//! Two backbones are available: a ResNet-50 trunk with the classifier removed
//! (side-outs after the stem and after each residual stage) and a small
//! five-stage CNN with the same downsampling schedule for CPU-scale work.
//! [`DualBackbone`] owns one backbone per stream, or a single shared one fed
//! through the [`Dam`] depth adapter.

use std::path::{Path, PathBuf};

use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::nn::{conv2d, group_norm, max_pool_3x3_s2_p1, Conv2d, ConvOpts, FrozenBatchNorm, ParamStore, Scope};
use crate::{Error, Result};

pub const NUM_LEVELS: usize = 5;
/// Total stride of the deepest level; input sides must be a multiple of it.
pub const INPUT_MULTIPLE: usize = 32;
pub const RESNET50_CHANNELS: [usize; NUM_LEVELS] = [64, 256, 512, 1024, 2048];
pub const DEFAULT_TOY_CHANNELS: [usize; NUM_LEVELS] = [8, 16, 32, 64, 64];
/// Per-level downsampling factor relative to the input.
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [4, 4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// ResNet-50 trunk.
    Full,
    /// Five conv stages with the ResNet downsampling schedule.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub shared_weights: bool,
    pub use_dam: bool,
    pub toy_channels: [usize; NUM_LEVELS],
    /// Optional pretrained trunk weights in the checkpoint container format.
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Toy,
            shared_weights: false,
            use_dam: false,
            toy_channels: DEFAULT_TOY_CHANNELS,
            weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn full() -> Self {
        Self {
            kind: BackboneKind::Full,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> [usize; NUM_LEVELS] {
        match self.kind {
            BackboneKind::Full => RESNET50_CHANNELS,
            BackboneKind::Toy => self.toy_channels,
        }
    }

    /// Spatial side of each level for a square input of side `input`.
    pub fn sides(&self, input: usize) -> [usize; NUM_LEVELS] {
        LEVEL_STRIDES.map(|s| input / s)
    }
}

/// Checks that an input side can go through all five downsamplings.
pub fn check_input_side(h: usize, w: usize) -> Result<()> {
    for side in [h, w] {
        if side == 0 || side % INPUT_MULTIPLE != 0 {
            let padded = side.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
            return Err(Error::Shape(format!(
                "input side {side} is not divisible by {INPUT_MULTIPLE}; pad it by {} to {padded}",
                padded - side
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Depth,
}

/// Side-outs of the five backbone stages, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub modality: Modality,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, modality: Modality) -> Result<Self> {
        if levels.len() != NUM_LEVELS {
            return Err(Error::Shape(format!("pyramid needs {NUM_LEVELS} levels, got {}", levels.len())));
        }
        let mut prev = usize::MAX;
        for (i, l) in levels.iter().enumerate() {
            let (_, _, h, _) = l.dims4()?;
            if h > prev {
                return Err(Error::Shape(format!("level {} grows from {prev} to {h}", i + 1)));
            }
            prev = h;
        }
        Ok(Self { levels, modality })
    }

    /// Level `i` in 1..=5.
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }

    pub fn sides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dims()[2]).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dims()[1]).collect()
    }
}

pub const STUDENT_LEVELS: [usize; 3] = [1, 2, 3];
pub const TEACHER_LEVELS: [usize; 3] = [3, 4, 5];
pub const SPLIT_LEVEL: usize = 3;

/// Low-level (student) and high-level (teacher) groups; level 3 is in both.
///
/// The tensors alias the pyramid's; no data is copied.
#[derive(Debug, Clone)]
pub struct BifurcatedGroups {
    pub students: [Tensor; 3],
    pub teachers: [Tensor; 3],
}

impl BifurcatedGroups {
    pub fn student_levels(&self) -> [usize; 3] {
        STUDENT_LEVELS
    }

    pub fn teacher_levels(&self) -> [usize; 3] {
        TEACHER_LEVELS
    }

    pub fn shared_level(&self) -> usize {
        SPLIT_LEVEL
    }
}

pub fn bifurcate(p: &FeaturePyramid) -> BifurcatedGroups {
    let pick = |ids: [usize; 3]| ids.map(|i| p.level(i).clone());
    BifurcatedGroups {
        students: pick(STUDENT_LEVELS),
        teachers: pick(TEACHER_LEVELS),
    }
}

#[derive(Debug, Clone)]
struct ToyStage {
    conv: Conv2d,
    norm: GroupNorm,
    pool: bool,
}

/// Stage 1 halves twice (strided conv, then pooling), stage 2 keeps the side,
/// stages 3-5 halve once each: strides (4, 4, 8, 16, 32).
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    stages: Vec<ToyStage>,
}

impl ToyBackbone {
    pub fn new(s: &Scope, in_channels: usize, channels: [usize; NUM_LEVELS]) -> Result<Self> {
        let mut stages = Vec::with_capacity(NUM_LEVELS);
        let mut c_in = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let st = s.pp(format!("stage{}", i + 1));
            let stride = if i == 0 { 2 } else { 1 };
            stages.push(ToyStage {
                conv: conv2d(&st.pp("conv"), c_in, c, 3, ConvOpts::same(3).stride(stride).no_bias())?,
                norm: group_norm(&st.pp("norm"), c)?,
                pool: i != 1,
            });
            c_in = c;
        }
        Ok(Self { stages })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(NUM_LEVELS);
        let mut h = x.clone();
        for st in &self.stages {
            h = st.norm.forward(&st.conv.forward(&h)?)?.relu()?;
            if st.pool {
                h = h.avg_pool2d(2)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(s: &Scope, c_in: usize, width: usize, stride: usize) -> Result<Self> {
        let c_out = width * 4;
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                conv2d(&s.pp("downsample.0"), c_in, c_out, 1, ConvOpts::default().stride(stride).no_bias())?,
                FrozenBatchNorm::new(&s.pp("downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv2d(&s.pp("conv1"), c_in, width, 1, ConvOpts::default().no_bias())?,
            bn1: FrozenBatchNorm::new(&s.pp("bn1"), width)?,
            conv2: conv2d(&s.pp("conv2"), width, width, 3, ConvOpts::same(3).stride(stride).no_bias())?,
            bn2: FrozenBatchNorm::new(&s.pp("bn2"), width)?,
            conv3: conv2d(&s.pp("conv3"), width, c_out, 1, ConvOpts::default().no_bias())?,
            bn3: FrozenBatchNorm::new(&s.pp("bn3"), c_out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// ResNet-50 without the final pooling and classifier. Parameter names follow
/// the usual `conv1`, `bn1`, `layerN.i.*` layout so converted weights load
/// directly.
#[derive(Debug, Clone)]
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new(s: &Scope, in_channels: usize) -> Result<Self> {
        let conv1 = conv2d(&s.pp("conv1"), in_channels, 64, 7, ConvOpts::same(7).stride(2).no_bias())?;
        let bn1 = FrozenBatchNorm::new(&s.pp("bn1"), 64)?;
        let mut layers = Vec::with_capacity(4);
        let mut c_in = 64;
        for (li, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let stride = if li == 0 { 1 } else { 2 };
            let mut layer = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let st = s.pp(format!("layer{}.{b}", li + 1));
                layer.push(Bottleneck::new(&st, c_in, width, if b == 0 { stride } else { 1 })?);
                c_in = width * 4;
            }
            layers.push(layer);
        }
        Ok(Self { conv1, bn1, layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let mut h = max_pool_3x3_s2_p1(&h)?;
        let mut out = vec![h.clone()];
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Toy(ToyBackbone),
    Full(ResNet50),
}

impl Backbone {
    pub fn new(s: &Scope, cfg: &BackboneConfig, in_channels: usize) -> Result<Self> {
        Ok(match cfg.kind {
            BackboneKind::Toy => Backbone::Toy(ToyBackbone::new(s, in_channels, cfg.toy_channels)?),
            BackboneKind::Full => Backbone::Full(ResNet50::new(s, in_channels)?),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        match self {
            Backbone::Toy(b) => b.forward(x),
            Backbone::Full(b) => b.forward(x),
        }
    }
}

/// Depth adapter: maps an (RGB, depth) pair to a 3-channel image that a
/// backbone shared with the RGB stream can ingest.
///
/// `dif = conv_dif(rgb - depth)`, `d = conv_depth(depth)`,
/// `out = conv_out(d + d * dif)`, all 3x3 convolutions.
#[derive(Debug, Clone)]
pub struct Dam {
    pub conv_dif: Conv2d,
    pub conv_depth: Conv2d,
    pub conv_out: Conv2d,
}

impl Dam {
    pub fn new(s: &Scope) -> Result<Self> {
        let opts = ConvOpts::same(3).linear();
        Ok(Self {
            conv_dif: conv2d(&s.pp("conv_dif"), 3, 3, 3, opts)?,
            conv_depth: conv2d(&s.pp("conv_depth"), 1, 3, 3, opts)?,
            conv_out: conv2d(&s.pp("conv_out"), 3, 3, 3, opts)?,
        })
    }

    pub fn adapt(&self, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = rgb.dims4()?;
        let (bd, cd, hd, wd) = depth.dims4()?;
        if c != 3 || cd != 1 || (b, h, w) != (bd, hd, wd) {
            return Err(Error::Shape(format!(
                "depth adapter expects rgb (B,3,H,W) and depth (B,1,H,W), got {:?} and {:?}",
                rgb.dims(),
                depth.dims()
            )));
        }
        let dif = self.conv_dif.forward(&rgb.broadcast_sub(depth)?)?;
        let d = self.conv_depth.forward(depth)?;
        let mixed = (&d + (&d * &dif)?)?;
        Ok(self.conv_out.forward(&mixed)?)
    }
}

/// The RGB and depth trunks.
#[derive(Debug, Clone)]
pub enum DualBackbone {
    Separate {
        rgb: Backbone,
        depth: Backbone,
    },
    Shared {
        backbone: Backbone,
        dam: Option<Dam>,
    },
}

pub const RGB_PREFIX: &str = "rgb_backbone";
pub const DEPTH_PREFIX: &str = "depth_backbone";
pub const SHARED_PREFIX: &str = "shared_backbone";
pub const DAM_PREFIX: &str = "dam";

impl DualBackbone {
    pub fn new(s: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        let dual = if cfg.shared_weights {
            if !cfg.use_dam {
                log::warn!("shared backbone without the depth adapter; depth is replicated to 3 channels");
            }
            DualBackbone::Shared {
                backbone: Backbone::new(&s.pp(SHARED_PREFIX), cfg, 3)?,
                dam: if cfg.use_dam { Some(Dam::new(&s.pp(DAM_PREFIX))?) } else { None },
            }
        } else {
            DualBackbone::Separate {
                rgb: Backbone::new(&s.pp(RGB_PREFIX), cfg, 3)?,
                depth: Backbone::new(&s.pp(DEPTH_PREFIX), cfg, 1)?,
            }
        };
        if let Some(path) = &cfg.weights {
            dual.load_pretrained(s, path)?;
        }
        Ok(dual)
    }

    fn prefixes(&self) -> (&'static str, &'static str) {
        match self {
            DualBackbone::Separate { .. } => (RGB_PREFIX, DEPTH_PREFIX),
            DualBackbone::Shared { .. } => (SHARED_PREFIX, SHARED_PREFIX),
        }
    }

    /// Parameters (and buffers) used by one stream's trunk. For the shared
    /// variant both streams return the very same tensors.
    pub fn stream_parameters(&self, store: &ParamStore, stream: Stream) -> Vec<Tensor> {
        let (rgb, depth) = self.prefixes();
        let prefix = match stream {
            Stream::Rgb => rgb,
            Stream::Depth => depth,
        };
        store.tensors_with_prefix(&format!("{prefix}."))
    }

    /// Runs one stream. In the shared configuration a depth input must
    /// already be adapted (3 channels), see [`DualBackbone::extract_pair`].
    pub fn extract_pyramid(&self, image: &Tensor, stream: Stream) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        check_input_side(h, w)?;
        let (net, expected) = match (self, stream) {
            (DualBackbone::Separate { rgb, .. }, Stream::Rgb) => (rgb, 3),
            (DualBackbone::Separate { depth, .. }, Stream::Depth) => (depth, 1),
            (DualBackbone::Shared { backbone, .. }, _) => (backbone, 3),
        };
        if c != expected {
            return Err(Error::Shape(format!(
                "{stream:?} stream expects {expected} input channels, got {c}"
            )));
        }
        let modality = match stream {
            Stream::Rgb => Modality::Rgb,
            Stream::Depth => Modality::Depth,
        };
        FeaturePyramid::new(net.forward(image)?, modality)
    }

    /// Both pyramids for an RGB-D pair, applying the depth adapter when present.
    pub fn extract_pair(&self, rgb: &Tensor, depth: &Tensor) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let rgb_p = self.extract_pyramid(rgb, Stream::Rgb)?;
        let depth_in = match self {
            DualBackbone::Separate { .. } => depth.clone(),
            DualBackbone::Shared { dam: Some(dam), .. } => dam.adapt(rgb, depth)?,
            DualBackbone::Shared { dam: None, .. } => depth.repeat((1, 3, 1, 1))?,
        };
        let depth_p = self.extract_pyramid(&depth_in, Stream::Depth)?;
        Ok((rgb_p, depth_p))
    }

    /// Copies trunk weights from a checkpoint container whose tensor names are
    /// relative to the trunk (`conv1.weight`, `layer1.0.bn1.running_mean`, ...).
    /// A 3-channel stem loaded into the 1-channel depth stem is averaged over
    /// its input channels. A missing file only warns.
    pub fn load_pretrained(&self, s: &Scope, path: &Path) -> Result<usize> {
        if !path.exists() {
            log::warn!("pretrained weights {} not found; training from scratch", path.display());
            return Ok(0);
        }
        let ckpt = checkpoint::load(path)?;
        let store = s.store();
        let (rgb, depth) = self.prefixes();
        let mut prefixes = vec![rgb];
        if depth != rgb {
            prefixes.push(depth);
        }
        let mut loaded = 0;
        for prefix in prefixes {
            let base = if s.prefix().is_empty() {
                prefix.to_string()
            } else {
                format!("{}.{prefix}", s.prefix())
            };
            for (name, value) in &ckpt.tensors {
                let target = format!("{base}.{name}");
                let Some(var) = store.get(&target) else { continue };
                let dims = var.as_tensor().dims().to_vec();
                let value = if value.dims() == dims.as_slice() {
                    value.clone()
                } else if dims.len() == 4 && dims[1] == 1 && value.dims().get(1) == Some(&3) {
                    value.mean_keepdim(1)?
                } else {
                    log::warn!("skipping {name}: shape {:?} vs {dims:?}", value.dims());
                    continue;
                };
                store.assign(&target, &value)?;
                loaded += 1;
            }
        }
        log::info!("loaded {loaded} pretrained tensors from {}", path.display());
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn schedule_arithmetic() {
        let cfg = BackboneConfig::full();
        assert_eq!(cfg.sides(352), [88, 88, 44, 22, 11]);
        assert_eq!(cfg.channels(), [64, 256, 512, 1024, 2048]);
        assert_eq!(BackboneConfig::default().sides(64), [16, 16, 8, 4, 2]);
    }

    #[test]
    fn indivisible_side_reports_padding() {
        let err = check_input_side(50, 64).unwrap_err().to_string();
        assert!(err.contains("pad it by 14 to 64"), "{err}");
        assert!(check_input_side(352, 352).is_ok());
    }

    #[test]
    fn bifurcation_groups() {
        let dev = Device::Cpu;
        let levels: Vec<Tensor> = [8usize, 8, 4, 2, 1]
            .iter()
            .map(|&s| Tensor::zeros((1, 2, s, s), DType::F32, &dev).unwrap())
            .collect();
        let mut p = FeaturePyramid::new(levels, Modality::Cross).unwrap();
        let g = bifurcate(&p);
        assert_eq!(g.students.len(), 3);
        assert_eq!(g.teachers.len(), 3);
        assert_eq!(g.shared_level(), 3);
        assert_eq!(g.students[2].id(), g.teachers[0].id());
        let mut covered: Vec<usize> = g.student_levels().into_iter().chain(g.teacher_levels()).collect();
        covered.sort_unstable();
        covered.dedup();
        assert_eq!(covered, vec![1, 2, 3, 4, 5]);

        // replacing a teacher-only level does not touch the students
        p.levels[4] = Tensor::ones((1, 2, 1, 1), DType::F32, &dev).unwrap();
        let g2 = bifurcate(&p);
        for (a, b) in g.students.iter().zip(&g2.students) {
            assert_eq!(a.id(), b.id());
        }
        assert_ne!(g.teachers[2].id(), g2.teachers[2].id());
    }

    #[test]
    fn pyramid_rejects_growing_levels() {
        let dev = Device::Cpu;
        let levels: Vec<Tensor> = [8usize, 8, 16, 2, 1]
            .iter()
            .map(|&s| Tensor::zeros((1, 2, s, s), DType::F32, &dev).unwrap())
            .collect();
        assert!(FeaturePyramid::new(levels, Modality::Rgb).is_err());
    }
}
