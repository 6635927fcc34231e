//! Dataset ingestion, split materialisation and saliency-map I/O.
//!
//! A dataset root holds three sibling folders, `RGB/`, `depth/` and `GT/`,
//! whose files are paired by stem (file name without extension).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::interp_weights;
use crate::{Error, Result};

pub const RGB_DIR: &str = "RGB";
pub const DEPTH_DIR: &str = "depth";
pub const GT_DIR: &str = "GT";
pub const DEFAULT_SIDE: usize = 352;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One RGB-D training or test pair with its mask.
///
/// `rgb` is `H x W x 3` in `[0, 1]`, `depth` and `gt` are `H x W`; `gt` only
/// holds 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub id: String,
    pub rgb: Array3<f32>,
    pub depth: Array2<f32>,
    pub gt: Array2<f32>,
}

impl RgbdSample {
    pub fn new(id: impl Into<String>, rgb: Array3<f32>, depth: Array2<f32>, gt: Array2<f32>) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = rgb.dim();
        if c != 3 {
            return Err(Error::Shape(format!("{id}: rgb has {c} channels, expected 3")));
        }
        if depth.dim() != (h, w) || gt.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "{id}: rgb {h}x{w}, depth {:?}, gt {:?}",
                depth.dim(),
                gt.dim()
            )));
        }
        if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("{id}: ground truth is not binary")));
        }
        Ok(Self { id, rgb, depth, gt })
    }

    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }

    /// Copy with the depth map replaced by zeros.
    pub fn without_depth(&self) -> Self {
        Self {
            depth: Array2::zeros(self.depth.dim()),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    /// Stems present in some but not all of the three folders.
    pub unmatched: Vec<String>,
    /// Triples dropped because their images disagree in size.
    pub rejected: Vec<String>,
    #[serde(default)]
    pub invert_depth: bool,
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Scans `root/{RGB,depth,GT}` and pairs files by stem.
pub fn load_dataset(root: impl AsRef<Path>, name: &str) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut listings = Vec::with_capacity(3);
    for sub in [RGB_DIR, DEPTH_DIR, GT_DIR] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", dir.display())));
        }
        listings.push(list_stems(&dir)?);
    }
    let all: BTreeSet<&String> = listings.iter().flat_map(|m| m.keys()).collect();
    let mut entries = Vec::new();
    let mut unmatched = Vec::new();
    let mut rejected = Vec::new();
    for stem in all {
        match (listings[0].get(stem), listings[1].get(stem), listings[2].get(stem)) {
            (Some(rgb), Some(depth), Some(gt)) => {
                let dims: Vec<_> = [rgb, depth, gt]
                    .iter()
                    .map(|p| image::image_dimensions(p).ok())
                    .collect();
                if dims.iter().all(|d| d.is_some() && *d == dims[0]) {
                    entries.push(ManifestEntry {
                        id: stem.clone(),
                        rgb: rgb.clone(),
                        depth: depth.clone(),
                        gt: gt.clone(),
                    });
                } else {
                    log::warn!("{name}/{stem}: size mismatch {dims:?}");
                    rejected.push(format!("{stem}: sizes {dims:?}"));
                }
            }
            _ => unmatched.push(stem.clone()),
        }
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "zero matched triples under {}",
            root.display()
        )));
    }
    if !unmatched.is_empty() {
        log::warn!("{name}: {} unmatched file stems", unmatched.len());
    }
    Ok(DatasetManifest {
        name: name.to_string(),
        root: root.to_path_buf(),
        entries,
        split: Split::Test,
        unmatched,
        rejected,
        invert_depth: false,
    })
}

#[derive(Serialize)]
struct ManifestRecord<'a> {
    id: &'a str,
    rgb: &'a Path,
    depth: &'a Path,
    gt: &'a Path,
    width: u32,
    height: u32,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSON export: one record per entry with its image dimensions.
    pub fn to_json(&self) -> Result<String> {
        let mut records = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let (width, height) = image::image_dimensions(&e.rgb).map_err(|source| Error::Image {
                path: e.rgb.clone(),
                source,
            })?;
            records.push(ManifestRecord {
                id: &e.id,
                rgb: &e.rgb,
                depth: &e.depth,
                gt: &e.gt,
                width,
                height,
            });
        }
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "name": self.name,
            "split": self.split,
            "entries": records,
        }))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub side: usize,
    pub invert_depth: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            side: DEFAULT_SIDE,
            invert_depth: false,
        }
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Min-max normalises `depth` in place; a constant map becomes all zeros.
/// Returns `false` for the constant case.
pub fn normalize_depth(depth: &mut Array2<f32>) -> bool {
    let (lo, hi) = depth
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo <= f32::EPSILON * hi.abs().max(1.0) {
        depth.fill(0.0);
        return false;
    }
    depth.mapv_inplace(|v| (v - lo) / (hi - lo));
    true
}

fn load_rgb_depth(id: &str, rgb: &Path, depth: &Path, opts: &LoadOptions) -> Result<(Array3<f32>, Array2<f32>)> {
    let side = opts.side as u32;
    let n = opts.side;
    let rgb = open_image(rgb)?.to_rgb32f();
    let rgb = imageops::resize(&rgb, side, side, FilterType::Triangle);
    let rgb = Array3::from_shape_vec((n, n, 3), rgb.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))?
        .mapv(|v| v.clamp(0.0, 1.0));
    let depth = open_image(depth)?.to_luma32f();
    let depth = imageops::resize(&depth, side, side, FilterType::Triangle);
    let mut depth =
        Array2::from_shape_vec((n, n), depth.into_raw()).map_err(|e| Error::Shape(e.to_string()))?;
    if !normalize_depth(&mut depth) {
        log::warn!("{id}: constant depth map, using zeros");
    } else if opts.invert_depth {
        depth.mapv_inplace(|v| 1.0 - v);
    }
    Ok((rgb, depth))
}

/// Decodes one triple, resizes it to `opts.side` and normalises each map.
pub fn load_sample(entry: &ManifestEntry, opts: &LoadOptions) -> Result<RgbdSample> {
    let (rgb, depth) = load_rgb_depth(&entry.id, &entry.rgb, &entry.depth, opts)?;
    let n = opts.side;
    let gt = open_image(&entry.gt)?.to_luma32f();
    let gt = imageops::resize(&gt, n as u32, n as u32, FilterType::Nearest);
    let gt = Array2::from_shape_vec((n, n), gt.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))?
        .mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    RgbdSample::new(entry.id.clone(), rgb, depth, gt)
}

/// An RGB-D pair for inference; the mask, when present, only fixes the
/// output resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputPair {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: Option<PathBuf>,
}

impl InputPair {
    /// `(height, width)` of the mask if there is one, else of the RGB image.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        let p = self.gt.as_ref().unwrap_or(&self.rgb);
        let (w, h) = image::image_dimensions(p).map_err(|source| Error::Image {
            path: p.clone(),
            source,
        })?;
        Ok((h as usize, w as usize))
    }

    /// Loads the pair with an all-zero mask.
    pub fn load(&self, opts: &LoadOptions) -> Result<RgbdSample> {
        let (rgb, depth) = load_rgb_depth(&self.id, &self.rgb, &self.depth, opts)?;
        let gt = Array2::zeros(depth.raw_dim());
        RgbdSample::new(self.id.clone(), rgb, depth, gt)
    }
}

/// Pairs `root/RGB` with `root/depth` by stem, attaching `root/GT` masks when
/// that folder exists.
pub fn scan_pairs(root: impl AsRef<Path>) -> Result<Vec<InputPair>> {
    let root = root.as_ref();
    let mut listings = Vec::with_capacity(2);
    for sub in [RGB_DIR, DEPTH_DIR] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", dir.display())));
        }
        listings.push(list_stems(&dir)?);
    }
    let gt_dir = root.join(GT_DIR);
    let gts = if gt_dir.is_dir() { list_stems(&gt_dir)? } else { BTreeMap::new() };
    let pairs: Vec<InputPair> = listings[0]
        .iter()
        .filter_map(|(stem, rgb)| {
            listings[1].get(stem).map(|depth| InputPair {
                id: stem.clone(),
                rgb: rgb.clone(),
                depth: depth.clone(),
                gt: gts.get(stem).cloned(),
            })
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("zero matched RGB/depth pairs under {}", root.display())));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitComponent {
    pub dataset: String,
    pub count: usize,
    pub seed: u64,
}

/// Which samples train a model and which datasets test it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<SplitComponent>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub dataset: String,
    pub index: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterializedSplit {
    pub train: Vec<SampleRef>,
    pub test: BTreeMap<String, Vec<SampleRef>>,
}

/// Anything that names a dataset and lists its sample ids in a fixed order.
pub trait SampleIndex {
    fn dataset_name(&self) -> &str;
    fn sample_id(&self, index: usize) -> &str;
    fn num_samples(&self) -> usize;
}

impl SampleIndex for DatasetManifest {
    fn dataset_name(&self) -> &str {
        &self.name
    }

    fn sample_id(&self, index: usize) -> &str {
        &self.entries[index].id
    }

    fn num_samples(&self) -> usize {
        self.entries.len()
    }
}

fn find_dataset<'a, D: SampleIndex>(datasets: &'a [D], name: &str) -> Result<&'a D> {
    datasets
        .iter()
        .find(|m| m.dataset_name() == name)
        .ok_or_else(|| Error::Dataset(format!("no dataset named {name}")))
}

/// Draws `count` training samples per component; whatever a component leaves
/// behind is that dataset's test set. Datasets without a training component
/// are tested in full.
pub fn materialize_split<D: SampleIndex>(spec: &SplitSpec, datasets: &[D]) -> Result<MaterializedSplit> {
    let to_ref = |m: &D, i: usize| SampleRef {
        dataset: m.dataset_name().to_string(),
        index: i,
        id: m.sample_id(i).to_string(),
    };
    let mut train = Vec::new();
    let mut remainders: BTreeMap<String, Vec<SampleRef>> = BTreeMap::new();
    for comp in &spec.train {
        let m = find_dataset(datasets, &comp.dataset)?;
        if comp.count > m.num_samples() {
            return Err(Error::Dataset(format!(
                "{} has {} samples, {} requested for training",
                comp.dataset,
                m.num_samples(),
                comp.count
            )));
        }
        let mut order: Vec<usize> = (0..m.num_samples()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(comp.seed);
        order.shuffle(&mut rng);
        let (tr, rest) = order.split_at(comp.count);
        train.extend(tr.iter().map(|&i| to_ref(m, i)));
        let mut rest = rest.to_vec();
        rest.sort_unstable();
        remainders.insert(comp.dataset.clone(), rest.into_iter().map(|i| to_ref(m, i)).collect());
    }
    let mut test = BTreeMap::new();
    for name in &spec.test {
        let refs = match remainders.get(name) {
            Some(r) => r.clone(),
            None => {
                let m = find_dataset(datasets, name)?;
                (0..m.num_samples()).map(|i| to_ref(m, i)).collect()
            }
        };
        test.insert(name.clone(), refs);
    }
    Ok(MaterializedSplit { train, test })
}

/// Per-channel RGB standardisation applied when samples become tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// A stack of samples as NCHW tensors.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
}

impl SampleBatch {
    pub fn from_samples(samples: &[&RgbdSample], norm: &Normalization, dtype: DType) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let b = samples.len();
        let mut rgb = Vec::with_capacity(b * 3 * h * w);
        let mut depth = Vec::with_capacity(b * h * w);
        let mut gt = Vec::with_capacity(b * h * w);
        for s in samples {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Shape(format!("{} is {}x{}, batch is {h}x{w}", s.id, s.height(), s.width())));
            }
            for c in 0..3 {
                let ch = s.rgb.index_axis(Axis(2), c);
                rgb.extend(ch.iter().map(|v| (v - norm.mean[c]) / norm.std[c]));
            }
            depth.extend(s.depth.iter().copied());
            gt.extend(s.gt.iter().copied());
        }
        let dev = Device::Cpu;
        Ok(Self {
            rgb: Tensor::from_vec(rgb, (b, 3, h, w), &dev)?.to_dtype(dtype)?,
            depth: Tensor::from_vec(depth, (b, 1, h, w), &dev)?.to_dtype(dtype)?,
            gt: Tensor::from_vec(gt, (b, 1, h, w), &dev)?.to_dtype(dtype)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Final,
}

/// Single-channel map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub map: Array2<f32>,
    pub stage: Stage,
}

impl SaliencyMap {
    pub fn new(map: Array2<f32>, stage: Stage) -> Self {
        Self { map, stage }
    }

    /// Converts a `(1, 1, H, W)`, `(1, H, W)` or `(H, W)` tensor.
    pub fn from_tensor(t: &Tensor, stage: Stage) -> Result<Self> {
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("cannot read {dims:?} as a saliency map"))),
        };
        let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let map = Array2::from_shape_vec((h, w), data).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { map, stage })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.map.dim()
    }

    /// Bilinear resize (pixel-centre aligned).
    pub fn resized(&self, h: usize, w: usize) -> Self {
        Self {
            map: resize_plane(self.map.view(), h, w),
            stage: self.stage,
        }
    }

    /// Rescales to span `[0, 1]`; a constant map is left as is.
    pub fn min_max_normalized(&self) -> Self {
        let mut map = self.map.clone();
        let (lo, hi) = map
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi > lo {
            map.mapv_inplace(|v| (v - lo) / (hi - lo));
        }
        Self { map, stage: self.stage }
    }
}

/// Bilinear resize of a 2-D plane with pixel-centre alignment.
pub fn resize_plane(src: ArrayView2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (h_in, w_in) = src.dim();
    if (h_in, w_in) == (h, w) {
        return src.to_owned();
    }
    let mh = interp_weights(h_in, h, false);
    let mw = interp_weights(w_in, w, false);
    let mut tmp = Array2::<f64>::zeros((h_in, w));
    for y in 0..h_in {
        for x in 0..w {
            let row = &mw[x * w_in..(x + 1) * w_in];
            tmp[[y, x]] = row
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != 0.0)
                .map(|(i, &c)| c * f64::from(src[[y, i]]))
                .sum();
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        let row = &mh[y * h_in..(y + 1) * h_in];
        for x in 0..w {
            let v: f64 = row
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != 0.0)
                .map(|(i, &c)| c * tmp[[i, x]])
                .sum();
            out[[y, x]] = v as f32;
        }
    }
    out
}

/// Writes `map` as an 8-bit grayscale PNG, first resizing it to `size`
/// (`(height, width)`, normally the ground-truth resolution) when given.
pub fn save_saliency(map: &SaliencyMap, path: impl AsRef<Path>, size: Option<(usize, usize)>) -> Result<()> {
    let path = path.as_ref();
    if let Some(bad) = map.map.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "saliency value {bad} outside [0, 1]; normalise before saving"
        )));
    }
    let resized;
    let map = match size {
        Some((h, w)) if (h, w) != map.dims() => {
            resized = map.resized(h, w);
            &resized
        }
        _ => map,
    };
    let (h, w) = map.dims();
    let bytes: Vec<u8> = map
        .map
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a grayscale map (8- or 16-bit) into `[0, 1]`.
pub fn read_saliency(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let path = path.as_ref();
    let img = open_image(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    let map = Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(SaliencyMap::new(map, Stage::Final))
}

/// Reads a mask and binarises it at 0.5.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    Ok(read_saliency(path)?
        .map
        .mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Writes a sample to `root/{RGB,depth,GT}/<id>.png` (8-bit).
pub fn write_sample(root: impl AsRef<Path>, sample: &RgbdSample) -> Result<()> {
    let root = root.as_ref();
    let (h, w) = (sample.height() as u32, sample.width() as u32);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let rgb: Vec<u8> = sample.rgb.iter().map(|&v| q(v)).collect();
    let rgb = image::RgbImage::from_raw(w, h, rgb).expect("rgb buffer length");
    let depth = GrayImage::from_raw(w, h, sample.depth.iter().map(|&v| q(v)).collect()).expect("depth buffer");
    let gt = GrayImage::from_raw(w, h, sample.gt.iter().map(|&v| q(v)).collect()).expect("gt buffer");
    let target = |sub: &str| -> Result<PathBuf> {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir.join(format!("{}.png", sample.id)))
    };
    let wrap = |path: PathBuf| move |source| Error::Image { path, source };
    let p = target(RGB_DIR)?;
    rgb.save(&p).map_err(wrap(p.clone()))?;
    let p = target(DEPTH_DIR)?;
    depth.save(&p).map_err(wrap(p.clone()))?;
    let p = target(GT_DIR)?;
    gt.save(&p).map_err(wrap(p.clone()))?;
    Ok(())
}
