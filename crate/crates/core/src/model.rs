//! End-to-end assembly: cross-modal fusion, teacher decoding, saliency-guided
//! refinement of the student features, student decoding, the joint loss and
//! the ablation-variant factory.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneKind, DualBackbone, FeaturePyramid, NUM_LEVELS};
use crate::checkpoint;
use crate::data_io::{Normalization, RgbdSample, SampleBatch};
use crate::decoder::{Decoder, DecoderKind, FinalHead, HeadT1, Ptm};
use crate::dem::{Dem, DemConfig};
use crate::nn::{resize_bilinear, sigmoid, ParamStore, Scope};
use crate::{Error, Result};

/// Clamp applied to probabilities before taking logarithms in [`bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Rows of the aggregation-strategy and module ablation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantTag {
    /// Teachers decode first and refine the students (the full model).
    BbsRl,
    /// Students decode first and refine the teachers.
    BbsRh,
    /// Both groups decoded, no refinement between them.
    BbsNoRf,
    /// Single decoder over levels 1-3.
    Low3,
    /// Single decoder over levels 3-5.
    High3,
    /// Single decoder over all five levels.
    All5,
    NoCa,
    NoSa,
    /// Final head replaced by the two-conv head plus bilinear upsampling.
    NoPtm,
    /// Cascaded decoders replaced by projection + upsampling + sum.
    SumDecoder,
    /// Shared trunk with the depth adapter, no transposed head.
    Efficient,
    /// Base model: no channel attention, no spatial attention, no PTM.
    Base,
    BaseCa,
    BaseSa,
}

impl VariantTag {
    pub const ALL: [VariantTag; 14] = [
        VariantTag::BbsRl,
        VariantTag::BbsRh,
        VariantTag::BbsNoRf,
        VariantTag::Low3,
        VariantTag::High3,
        VariantTag::All5,
        VariantTag::NoCa,
        VariantTag::NoSa,
        VariantTag::NoPtm,
        VariantTag::SumDecoder,
        VariantTag::Efficient,
        VariantTag::Base,
        VariantTag::BaseCa,
        VariantTag::BaseSa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantTag::BbsRl => "BBS_RL",
            VariantTag::BbsRh => "BBS_RH",
            VariantTag::BbsNoRf => "BBS_NoRF",
            VariantTag::Low3 => "Low3",
            VariantTag::High3 => "High3",
            VariantTag::All5 => "All5",
            VariantTag::NoCa => "NoCA",
            VariantTag::NoSa => "NoSA",
            VariantTag::NoPtm => "NoPTM",
            VariantTag::SumDecoder => "SumDecoder",
            VariantTag::Efficient => "Efficient",
            VariantTag::Base => "BM",
            VariantTag::BaseCa => "BM_CA",
            VariantTag::BaseSa => "BM_SA",
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are interchangeable.
    fn from_str(s: &str) -> Result<Self> {
        let key = |v: &str| v.to_ascii_lowercase().replace('-', "_");
        let wanted = key(s.trim());
        VariantTag::ALL
            .into_iter()
            .find(|t| key(t.name()) == wanted)
            .ok_or_else(|| {
                let known: Vec<_> = VariantTag::ALL.iter().map(|t| t.name()).collect();
                Error::InvalidArgument(format!("unknown variant `{s}` (known: {})", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantTag,
    pub backbone: BackboneConfig,
    pub dem: DemConfig,
    pub decoder: DecoderKind,
    /// Group normalisation inside the decoder convolutions.
    pub decoder_norm: bool,
    pub ptm: bool,
    pub loss_alpha: f64,
    pub precision: Precision,
    /// Seed of the parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: VariantTag::BbsRl,
            backbone: BackboneConfig::default(),
            dem: DemConfig::default(),
            decoder: DecoderKind::Cascaded,
            decoder_norm: false,
            ptm: true,
            loss_alpha: 0.5,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// ResNet-50 trunks at full width.
    pub fn full() -> Self {
        Self {
            backbone: BackboneConfig::full(),
            ..Self::default()
        }
    }

    /// Sets the variant tag together with the module flags it implies.
    /// Flags unrelated to the tag keep their current values.
    pub fn with_variant(mut self, tag: VariantTag) -> Self {
        self.variant = tag;
        self.dem.channel_attention = true;
        self.dem.spatial_attention = true;
        self.ptm = true;
        self.decoder = DecoderKind::Cascaded;
        self.backbone.shared_weights = false;
        self.backbone.use_dam = false;
        match tag {
            VariantTag::NoCa => self.dem.channel_attention = false,
            VariantTag::NoSa => self.dem.spatial_attention = false,
            VariantTag::NoPtm => self.ptm = false,
            VariantTag::SumDecoder => self.decoder = DecoderKind::Sum,
            VariantTag::Efficient => {
                self.backbone.shared_weights = true;
                self.backbone.use_dam = true;
                self.ptm = false;
            }
            VariantTag::Base | VariantTag::BaseCa | VariantTag::BaseSa => {
                self.ptm = false;
                self.dem.channel_attention = tag == VariantTag::BaseCa;
                self.dem.spatial_attention = tag == VariantTag::BaseSa;
            }
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.loss_alpha) {
            return Err(Error::InvalidArgument(format!("loss_alpha {} outside [0, 1]", self.loss_alpha)));
        }
        if self.dem.ratio == 0 || self.dem.spatial_kernel % 2 == 0 {
            return Err(Error::InvalidArgument("dem ratio must be positive and the spatial kernel odd".into()));
        }
        if self.backbone.kind == BackboneKind::Toy && self.backbone.toy_channels.contains(&0) {
            return Err(Error::InvalidArgument("toy channels must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    /// Teacher group first.
    TeachersFirst,
    StudentsFirst,
}

#[derive(Debug, Clone)]
enum Layout {
    Cascade {
        first: Decoder,
        first_head: HeadT1,
        second: Decoder,
        final_head: FinalHead,
        order: Order,
        refine: bool,
    },
    Single {
        levels: Vec<usize>,
        decoder: Decoder,
        head: FinalHead,
    },
}

/// Model predictions for a batch. Maps are `(B, 1, H, W)` at input size.
#[derive(Debug, Clone)]
pub struct BbsOutputs {
    /// Initial map logits at the first decoder's native resolution.
    pub s1_native: Option<Tensor>,
    /// Initial map in [0, 1], upsampled to input size. Absent for
    /// single-decoder variants.
    pub s1: Option<Tensor>,
    pub s2_logits: Tensor,
    /// Final map in [0, 1].
    pub s2: Tensor,
}

/// Replacement for the initial map used in the refinement step.
#[derive(Debug, Clone)]
pub enum S1Override {
    /// Every pixel of the map takes this value.
    Constant(f64),
    /// A probability map, resized to each refined level.
    Map(Tensor),
}

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub rgb: FeaturePyramid,
    pub depth: FeaturePyramid,
    pub cross: FeaturePyramid,
    /// Levels (1-based) of the group that the initial map refines.
    pub refined_levels: Vec<usize>,
    /// That group before refinement.
    pub unrefined: Vec<Tensor>,
    /// The same group as fed to the second decoder.
    pub refined: Vec<Tensor>,
    /// Output of the second (or only) decoder, before the final head.
    pub aggregate: Tensor,
    pub outputs: BbsOutputs,
}

/// `f' = f + f * resize(s1)` for every feature in `group`.
pub fn refine(group: &[Tensor], s1: &S1Override) -> Result<Vec<Tensor>> {
    group
        .iter()
        .map(|f| {
            let (_, _, h, w) = f.dims4()?;
            let gate = match s1 {
                S1Override::Constant(v) => (f.ones_like()? * *v)?,
                S1Override::Map(m) => resize_bilinear(m, h, w, false)?.broadcast_as(f.shape())?,
            };
            Ok((f + (f * gate)?)?)
        })
        .collect()
}

/// Mean binary cross-entropy, `-mean(g log s + (1 - g) log(1 - s))`, with `s`
/// clamped to `[eps, 1 - eps]`.
pub fn bce(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    if s.dims() != g.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", s.dims(), g.dims())));
    }
    let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (g * s.log()?)?;
    let neg = (g.affine(-1.0, 1.0)? * s.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Per-stage losses and their weighted sum.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub s1: Option<Tensor>,
    pub s2: Tensor,
    pub total: Tensor,
}

/// `alpha * bce(S1, G) + (1 - alpha) * bce(S2, G)`; variants without an
/// initial map use `bce(S2, G)`.
pub fn total_loss(out: &BbsOutputs, g: &Tensor, alpha: f64) -> Result<LossParts> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("loss weight {alpha} outside [0, 1]")));
    }
    let l2 = bce(&out.s2, g)?;
    let (l1, total) = match &out.s1 {
        Some(s1) => {
            let l1 = bce(s1, g)?;
            let total = ((&l1 * alpha)? + (&l2 * (1.0 - alpha))?)?;
            (Some(l1), total)
        }
        None => (None, l2.clone()),
    };
    Ok(LossParts { s1: l1, s2: l2, total })
}

/// The network together with the store that owns its parameters.
#[derive(Debug, Clone)]
pub struct BbsNet {
    cfg: ModelConfig,
    store: ParamStore,
    pub backbone: DualBackbone,
    pub dem: Dem,
    layout: Layout,
}

fn final_head(s: &Scope, ptm: bool) -> Result<FinalHead> {
    Ok(if ptm {
        FinalHead::Ptm(Ptm::new(s)?)
    } else {
        FinalHead::Upsample(HeadT1::new(s)?)
    })
}

fn level_channels(channels: &[usize; NUM_LEVELS], levels: &[usize]) -> Vec<usize> {
    levels.iter().map(|&l| channels[l - 1]).collect()
}

const STUDENTS: [usize; 3] = [1, 2, 3];
const TEACHERS: [usize; 3] = [3, 4, 5];

impl BbsNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.precision.dtype(), cfg.seed);
        let root = store.root();
        let backbone = DualBackbone::new(&root, &cfg.backbone)?;
        let channels = cfg.backbone.channels();
        let dem = Dem::new(&root.pp("dem"), channels, &cfg.dem)?;
        let norm = cfg.decoder_norm;
        let dec = |name: &str, levels: &[usize]| {
            Decoder::new(&root.pp(name), cfg.decoder, &level_channels(&channels, levels), norm)
        };
        let single = |levels: Vec<usize>| -> Result<Layout> {
            Ok(Layout::Single {
                decoder: dec("decoder", &levels)?,
                head: final_head(&root.pp("head"), cfg.ptm)?,
                levels,
            })
        };
        let layout = match cfg.variant {
            VariantTag::Low3 => single(STUDENTS.to_vec())?,
            VariantTag::High3 => single(TEACHERS.to_vec())?,
            VariantTag::All5 => single((1..=NUM_LEVELS).collect())?,
            tag => {
                let order = if tag == VariantTag::BbsRh {
                    Order::StudentsFirst
                } else {
                    Order::TeachersFirst
                };
                let (g1, g2) = match order {
                    Order::TeachersFirst => (TEACHERS, STUDENTS),
                    Order::StudentsFirst => (STUDENTS, TEACHERS),
                };
                Layout::Cascade {
                    first: dec("decoder1", &g1)?,
                    first_head: HeadT1::new(&root.pp("head1"))?,
                    second: dec("decoder2", &g2)?,
                    final_head: final_head(&root.pp("head2"), cfg.ptm)?,
                    order,
                    refine: tag != VariantTag::BbsNoRf,
                }
            }
        };
        Ok(Self {
            cfg,
            store,
            backbone,
            dem,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable_params()
    }

    /// Number of decoder instances in the layout.
    pub fn num_decoders(&self) -> usize {
        match self.layout {
            Layout::Cascade { .. } => 2,
            Layout::Single { .. } => 1,
        }
    }

    /// Whether the initial map re-weights features before the second decoder.
    pub fn refines(&self) -> bool {
        matches!(self.layout, Layout::Cascade { refine: true, .. })
    }

    pub fn forward(&self, rgb: &Tensor, depth: &Tensor) -> Result<BbsOutputs> {
        Ok(self.forward_traced(rgb, depth, None)?.outputs)
    }

    pub fn forward_batch(&self, batch: &SampleBatch) -> Result<BbsOutputs> {
        self.forward(&batch.rgb, &batch.depth)
    }

    /// Forward pass that keeps intermediate tensors. `s1_override` replaces
    /// the initial map inside the refinement step only; the returned `s1`
    /// still reflects the network's own prediction.
    pub fn forward_traced(&self, rgb: &Tensor, depth: &Tensor, s1_override: Option<S1Override>) -> Result<ForwardTrace> {
        let (_, _, h, w) = rgb.dims4()?;
        let (rgb_p, depth_p) = self.backbone.extract_pair(rgb, depth)?;
        let cross = self.dem.fuse(&rgb_p, &depth_p)?;
        let pick = |levels: &[usize]| levels.iter().map(|&l| cross.level(l).clone()).collect::<Vec<_>>();
        let (refined_levels, unrefined, refined, aggregate, outputs) = match &self.layout {
            Layout::Single { levels, decoder, head } => {
                let group = pick(levels);
                let agg = decoder.forward(&group)?;
                let s2_logits = head.logits(&agg, h, w)?;
                let out = BbsOutputs {
                    s1_native: None,
                    s1: None,
                    s2: sigmoid(&s2_logits)?,
                    s2_logits,
                };
                (levels.clone(), group.clone(), group, agg, out)
            }
            Layout::Cascade {
                first,
                first_head,
                second,
                final_head,
                order,
                refine: do_refine,
            } => {
                let (g1, g2) = match order {
                    Order::TeachersFirst => (TEACHERS, STUDENTS),
                    Order::StudentsFirst => (STUDENTS, TEACHERS),
                };
                let agg1 = first.forward(&pick(&g1))?;
                let s1_native = first_head.logits(&agg1)?;
                let s1 = sigmoid(&resize_bilinear(&s1_native, h, w, false)?)?;
                let group = pick(&g2);
                let refined = if *do_refine {
                    let gate = match s1_override {
                        Some(o) => o,
                        None => S1Override::Map(sigmoid(&s1_native)?),
                    };
                    refine(&group, &gate)?
                } else {
                    group.clone()
                };
                let agg2 = second.forward(&refined)?;
                let s2_logits = final_head.logits(&agg2, h, w)?;
                let out = BbsOutputs {
                    s1_native: Some(s1_native),
                    s1: Some(s1),
                    s2: sigmoid(&s2_logits)?,
                    s2_logits,
                };
                (g2.to_vec(), group, refined, agg2, out)
            }
        };
        Ok(ForwardTrace {
            rgb: rgb_p,
            depth: depth_p,
            cross,
            refined_levels,
            unrefined,
            refined,
            aggregate,
            outputs,
        })
    }

    /// Final saliency maps in [0, 1] at each sample's resolution.
    pub fn predict(&self, samples: &[&RgbdSample], norm: &Normalization) -> Result<Vec<Array2<f32>>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let batch = SampleBatch::from_samples(samples, norm, self.store.dtype())?;
        let out = self.forward_batch(&batch)?;
        let maps = out.s2.to_dtype(DType::F32)?.squeeze(1)?;
        (0..samples.len())
            .map(|i| {
                let m = maps.get(i)?;
                let (h, w) = m.dims2()?;
                Array2::from_shape_vec((h, w), m.flatten_all()?.to_vec1::<f32>()?)
                    .map_err(|e| Error::Shape(e.to_string()))
            })
            .collect()
    }

    /// Checkpoint metadata: model config, variant, loss weight and config hash
    /// merged with `extra`.
    pub fn metadata(&self, extra: serde_json::Value) -> Result<serde_json::Value> {
        let mut meta = serde_json::json!({
            "kind": "bbsnet",
            "variant": self.cfg.variant.name(),
            "loss_alpha": self.cfg.loss_alpha,
            "config_hash": self.cfg.hash(),
            "model": serde_json::to_value(&self.cfg)?,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        Ok(meta)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let entries = self.store.entries();
        let tensors: Vec<(String, Tensor)> = entries
            .iter()
            .map(|(k, v, _)| (k.clone(), v.as_tensor().clone()))
            .collect();
        checkpoint::save(
            path,
            self.metadata(extra)?,
            tensors.iter().map(|(k, t)| (k.as_str(), t)),
        )
    }

    /// Rebuilds a model from a checkpoint written by [`BbsNet::save`] or by
    /// the trainer; optimizer state is ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let mut ckpt = checkpoint::load(path.as_ref())?;
        ckpt.tensors.retain(|k, _| !k.starts_with(checkpoint::OPTIMIZER_PREFIX));
        let cfg: ModelConfig = ckpt
            .metadata
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("metadata carries no model config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("model config: {e}"))))?;
        let mut cfg = cfg;
        // weights come from the checkpoint itself
        cfg.backbone.weights = None;
        let net = Self::new(cfg)?;
        net.load_tensors(&ckpt)?;
        Ok((net, ckpt.metadata))
    }

    /// Copies every tensor of `ckpt` into the store; names must match exactly.
    pub fn load_tensors(&self, ckpt: &checkpoint::Checkpoint) -> Result<()> {
        let entries = self.store.entries();
        if entries.len() != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                ckpt.tensors.len(),
                entries.len()
            )));
        }
        for (name, _, _) in &entries {
            let t = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            self.store.assign(name, t)?;
        }
        Ok(())
    }
}

/// Builds the model for `tag`, taking every setting not implied by the tag
/// from `base`.
pub fn build_variant(tag: VariantTag, base: &ModelConfig) -> Result<BbsNet> {
    BbsNet::new(base.clone().with_variant(tag))
}
