//! Cascaded decoder: global context modules, pyramid multiplication,
//! progressive concatenation, and the two output heads.

use candle_core::{Module, Tensor};

use serde::{Deserialize, Serialize};

use crate::nn::{conv2d, conv_transpose2d, resize_bilinear, resize_to, BasicConv, Conv2d, ConvOpts, ConvTranspose2d, Scope};
use crate::{Error, Result};

/// Channel width of every inter-level feature in the decoder.
pub const WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Global context modules + pyramid multiplication + progressive concatenation.
    Cascaded,
    /// 1x1 projection, upsampling and element-wise sum.
    Sum,
}

/// Four parallel branches with growing receptive fields plus a residual path.
///
/// Branch 1 is a 1x1 projection to [`WIDTH`]; branch `k` in 2..=4 continues
/// with a `(2k-1)x(2k-1)` convolution and a 3x3 convolution of dilation
/// `2k-1`. The concatenated branches are fused by a 3x3 convolution and added
/// to the input, projected by a 1x1 convolution when its width is not
/// [`WIDTH`].
#[derive(Debug, Clone)]
pub struct Gcm {
    pub branches: Vec<Vec<BasicConv>>,
    pub fuse: BasicConv,
    pub residual: Option<BasicConv>,
}

impl Gcm {
    pub fn new(s: &Scope, c_in: usize, norm: bool) -> Result<Self> {
        let mut branches = Vec::with_capacity(4);
        for k in 1..=4usize {
            let b = s.pp(format!("branch{k}"));
            let mut convs = vec![BasicConv::new(&b.pp(0), c_in, WIDTH, 1, ConvOpts::default(), norm, false)?];
            if k > 1 {
                let ks = 2 * k - 1;
                convs.push(BasicConv::new(&b.pp(1), WIDTH, WIDTH, ks, ConvOpts::same(ks), norm, false)?);
                convs.push(BasicConv::new(
                    &b.pp(2),
                    WIDTH,
                    WIDTH,
                    3,
                    ConvOpts::default().padding(ks).dilation(ks),
                    norm,
                    false,
                )?);
            }
            branches.push(convs);
        }
        let fuse = BasicConv::new(&s.pp("fuse"), 4 * WIDTH, WIDTH, 3, ConvOpts::same(3), norm, false)?;
        let residual = if c_in != WIDTH {
            Some(BasicConv::new(&s.pp("residual"), c_in, WIDTH, 1, ConvOpts::default(), norm, false)?)
        } else {
            None
        };
        Ok(Self { branches, fuse, residual })
    }

    /// Output of branch `k` (1-based).
    pub fn branch(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.branches[k - 1] {
            h = conv.forward(&h)?;
        }
        Ok(h)
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match &self.residual {
            Some(r) => r.forward(x)?,
            None => x.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let outs = (1..=4).map(|k| self.branch(k, x)).collect::<Result<Vec<_>>>()?;
        let cat = Tensor::cat(&outs, 1)?;
        Ok((self.fuse.forward(&cat)? + self.project(x)?)?)
    }
}

fn check_power_of_two_ratio(fine: &Tensor, coarse: &Tensor) -> Result<()> {
    let (_, _, hf, wf) = fine.dims4()?;
    let (_, _, hc, wc) = coarse.dims4()?;
    let ok = |f: usize, c: usize| c > 0 && f % c == 0 && (f / c).is_power_of_two();
    if ok(hf, hc) && ok(wf, wc) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "resolutions {hf}x{wf} and {hc}x{wc} are not related by a power of two"
        )))
    }
}

/// Multiplier convolutions: `convs[i][j]` maps level `i + 1 + j` onto level `i`.
#[derive(Debug, Clone)]
pub struct PyramidMultiply {
    pub convs: Vec<Vec<BasicConv>>,
}

impl PyramidMultiply {
    pub fn new(s: &Scope, levels: usize, norm: bool) -> Result<Self> {
        let mut convs = Vec::with_capacity(levels);
        for i in 0..levels {
            let row = (i + 1..levels)
                .map(|k| BasicConv::new(&s.pp(format!("m{i}_{k}")), WIDTH, WIDTH, 3, ConvOpts::same(3), norm, false))
                .collect::<Result<Vec<_>>>()?;
            convs.push(row);
        }
        Ok(Self { convs })
    }

    /// Number of multipliers applied to level index `i` (0 = finest).
    pub fn multipliers(&self, i: usize) -> usize {
        self.convs[i].len()
    }
}

/// `f_i' = f_i * prod_{k>i} Conv(Up(f_k))`, features ordered finest first.
/// The coarsest feature is returned untouched.
pub fn pyramid_multiply(group: &[Tensor], p: &PyramidMultiply) -> Result<Vec<Tensor>> {
    if group.len() != p.convs.len() {
        return Err(Error::Shape(format!(
            "pyramid multiply built for {} levels, got {}",
            p.convs.len(),
            group.len()
        )));
    }
    for w in group.windows(2) {
        check_power_of_two_ratio(&w[0], &w[1])?;
    }
    let mut out = Vec::with_capacity(group.len());
    for (i, f) in group.iter().enumerate() {
        let mut acc = f.clone();
        for (j, conv) in p.convs[i].iter().enumerate() {
            let higher = &group[i + 1 + j];
            acc = (acc * conv.forward(&resize_to(higher, f)?)?)?;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Convolutions of the progressive concatenation.
#[derive(Debug, Clone)]
pub struct Aggregation {
    /// `up[j]` transforms the running aggregate before it joins level `j`.
    pub up: Vec<BasicConv>,
    /// `concat[j]` mixes the concatenation at level `j`.
    pub concat: Vec<BasicConv>,
    pub out: BasicConv,
}

impl Aggregation {
    pub fn new(s: &Scope, levels: usize, norm: bool) -> Result<Self> {
        let mut up = Vec::with_capacity(levels - 1);
        let mut concat = Vec::with_capacity(levels - 1);
        for j in 0..levels - 1 {
            // width of the aggregate arriving from level j + 1
            let w_in = WIDTH * (levels - 1 - j);
            up.push(BasicConv::new(&s.pp(format!("up{j}")), w_in, w_in, 3, ConvOpts::same(3), norm, false)?);
            let w_cat = w_in + WIDTH;
            concat.push(BasicConv::new(&s.pp(format!("concat{j}")), w_cat, w_cat, 3, ConvOpts::same(3), norm, false)?);
        }
        let out = BasicConv::new(&s.pp("out"), WIDTH * levels, WIDTH, 3, ConvOpts::same(3), norm, false)?;
        Ok(Self { up, concat, out })
    }
}

/// Concatenation from the top: the running aggregate is upsampled, convolved
/// and concatenated with the next finer level, then mixed. The result has
/// [`WIDTH`] channels at the finest level's resolution.
pub fn progressive_aggregate(updated: &[Tensor], p: &Aggregation) -> Result<Tensor> {
    let n = updated.len();
    if n != p.up.len() + 1 {
        return Err(Error::Shape(format!("aggregation built for {} levels, got {n}", p.up.len() + 1)));
    }
    let mut acc = updated[n - 1].clone();
    for j in (0..n - 1).rev() {
        let lifted = p.up[j].forward(&resize_to(&acc, &updated[j])?)?;
        acc = p.concat[j].forward(&Tensor::cat(&[&updated[j], &lifted], 1)?)?;
    }
    Ok(p.out.forward(&acc)?)
}

/// GCMs followed by pyramid multiplication and progressive aggregation.
#[derive(Debug, Clone)]
pub struct CascadedDecoder {
    pub gcms: Vec<Gcm>,
    pub multiply: PyramidMultiply,
    pub aggregate: Aggregation,
}

impl CascadedDecoder {
    pub fn new(s: &Scope, in_channels: &[usize], norm: bool) -> Result<Self> {
        let gcms = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Gcm::new(&s.pp(format!("gcm{i}")), c, norm))
            .collect::<Result<_>>()?;
        Ok(Self {
            gcms,
            multiply: PyramidMultiply::new(&s.pp("multiply"), in_channels.len(), norm)?,
            aggregate: Aggregation::new(&s.pp("aggregate"), in_channels.len(), norm)?,
        })
    }

    pub fn forward(&self, features: &[Tensor]) -> Result<Tensor> {
        if features.len() != self.gcms.len() {
            return Err(Error::Shape(format!(
                "decoder expects {} features, got {}",
                self.gcms.len(),
                features.len()
            )));
        }
        let ctx = features
            .iter()
            .zip(&self.gcms)
            .map(|(f, g)| g.forward(f))
            .collect::<Result<Vec<_>>>()?;
        let updated = pyramid_multiply(&ctx, &self.multiply)?;
        progressive_aggregate(&updated, &self.aggregate)
    }
}

/// Baseline aggregation: per-level 1x1 projection to [`WIDTH`], upsampling to
/// the finest level and element-wise sum.
#[derive(Debug, Clone)]
pub struct SumDecoder {
    pub proj: Vec<Conv2d>,
}

impl SumDecoder {
    pub fn new(s: &Scope, in_channels: &[usize]) -> Result<Self> {
        let proj = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| conv2d(&s.pp(format!("proj{i}")), c, WIDTH, 1, ConvOpts::default().linear()))
            .collect::<Result<_>>()?;
        Ok(Self { proj })
    }

    pub fn forward(&self, features: &[Tensor]) -> Result<Tensor> {
        let finest = &features[0];
        let mut acc: Option<Tensor> = None;
        for (f, p) in features.iter().zip(&self.proj) {
            let y = resize_to(&p.forward(f)?, finest)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidArgument("sum decoder needs at least one feature".into()))
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Cascaded(CascadedDecoder),
    Sum(SumDecoder),
}

impl Decoder {
    pub fn new(s: &Scope, kind: DecoderKind, in_channels: &[usize], norm: bool) -> Result<Self> {
        Ok(match kind {
            DecoderKind::Cascaded => Decoder::Cascaded(CascadedDecoder::new(s, in_channels, norm)?),
            DecoderKind::Sum => Decoder::Sum(SumDecoder::new(s, in_channels)?),
        })
    }

    pub fn forward(&self, features: &[Tensor]) -> Result<Tensor> {
        match self {
            Decoder::Cascaded(d) => d.forward(features),
            Decoder::Sum(d) => d.forward(features),
        }
    }
}

/// Two 3x3 convolutions, `WIDTH -> WIDTH -> 1`, producing logits.
#[derive(Debug, Clone)]
pub struct HeadT1 {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl HeadT1 {
    pub fn new(s: &Scope) -> Result<Self> {
        Ok(Self {
            conv1: conv2d(&s.pp("conv1"), WIDTH, WIDTH, 3, ConvOpts::same(3))?,
            conv2: conv2d(&s.pp("conv2"), WIDTH, 1, 3, ConvOpts::same(3).linear())?,
        })
    }

    pub fn logits(&self, agg: &Tensor) -> Result<Tensor> {
        Ok(self.conv2.forward(&self.conv1.forward(agg)?.relu()?)?)
    }
}

/// 3x3 convolution then a x2 transposed convolution, with a x2 transposed
/// convolution on the skip path.
#[derive(Debug, Clone)]
pub struct TransposedBlock {
    pub conv: Conv2d,
    pub up: ConvTranspose2d,
    pub skip: ConvTranspose2d,
}

impl TransposedBlock {
    pub fn new(s: &Scope) -> Result<Self> {
        Ok(Self {
            conv: conv2d(&s.pp("conv"), WIDTH, WIDTH, 3, ConvOpts::same(3))?,
            up: conv_transpose2d(&s.pp("up"), WIDTH, WIDTH, 3, 2, 1, 1, true)?,
            skip: conv_transpose2d(&s.pp("skip"), WIDTH, WIDTH, 2, 2, 0, 0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.up.forward(&self.conv.forward(x)?.relu()?)?;
        Ok((y + self.skip.forward(x)?)?.relu()?)
    }
}

/// Progressive x4 upsampling head: two transposed residual blocks and three
/// 1x1 convolutions ending in one channel of logits.
#[derive(Debug, Clone)]
pub struct Ptm {
    pub blocks: [TransposedBlock; 2],
    pub convs: [Conv2d; 3],
}

impl Ptm {
    pub fn new(s: &Scope) -> Result<Self> {
        Ok(Self {
            blocks: [TransposedBlock::new(&s.pp("block0"))?, TransposedBlock::new(&s.pp("block1"))?],
            convs: [
                conv2d(&s.pp("conv0"), WIDTH, WIDTH, 1, ConvOpts::default())?,
                conv2d(&s.pp("conv1"), WIDTH, WIDTH, 1, ConvOpts::default())?,
                conv2d(&s.pp("conv2"), WIDTH, 1, 1, ConvOpts::default().linear())?,
            ],
        })
    }

    pub fn logits(&self, agg: &Tensor) -> Result<Tensor> {
        let mut h = agg.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        h = self.convs[0].forward(&h)?.relu()?;
        h = self.convs[1].forward(&h)?.relu()?;
        Ok(self.convs[2].forward(&h)?)
    }
}

/// Final-stage head: the transposed module, or the two-conv head followed by
/// bilinear upsampling.
#[derive(Debug, Clone)]
pub enum FinalHead {
    Ptm(Ptm),
    Upsample(HeadT1),
}

impl FinalHead {
    /// Logits at `(h, w)`.
    pub fn logits(&self, agg: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = match self {
            FinalHead::Ptm(p) => p.logits(agg)?,
            FinalHead::Upsample(t) => t.logits(agg)?,
        };
        resize_bilinear(&y, h, w, false)
    }
}
