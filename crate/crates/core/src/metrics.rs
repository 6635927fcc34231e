//! Saliency evaluation: MAE, precision-recall and F-measure curves,
//! S-measure, E-measure, and dataset-level aggregation.
//!
//! Maps are `(H, W)` arrays; predictions in [0, 1], ground truth binary
//! (values above 0.5 are foreground). A prediction is positive at threshold
//! `t = k / 255` when `S > t`, for `k = 0..=255`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::data_io::{read_mask, read_saliency, resize_plane};
use crate::{Error, Result};

pub const NUM_THRESHOLDS: usize = 256;
/// Weight of precision in the F-measure.
pub const BETA2: f64 = 0.3;
pub const DEFAULT_SMEASURE_ALPHA: f64 = 0.5;

/// `k / 255` for `k = 0..=255`.
pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

fn check_shapes(s: ArrayView2<f32>, g: ArrayView2<f32>) -> Result<()> {
    if s.dim() != g.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", s.dim(), g.dim())));
    }
    if s.is_empty() {
        return Err(Error::Shape("empty map".into()));
    }
    Ok(())
}

fn is_fg(g: f32) -> bool {
    g > 0.5
}

pub fn mae(s: ArrayView2<f32>, g: ArrayView2<f32>) -> Result<f64> {
    check_shapes(s, g)?;
    let sum: f64 = Zip::from(s).and(g).fold(0.0, |acc, &a, &b| acc + (a as f64 - b as f64).abs());
    Ok(sum / s.len() as f64)
}

/// Number of thresholds `k` with `v > k / 255`.
fn thresholds_below(v: f64) -> usize {
    if v.is_nan() || v <= 0.0 {
        return 0;
    }
    let mut n = ((v * 255.0).ceil() as usize).min(NUM_THRESHOLDS);
    // settle rounding at bin edges against the exact comparison
    while n > 0 && v <= threshold(n - 1) {
        n -= 1;
    }
    while n < NUM_THRESHOLDS && v > threshold(n) {
        n += 1;
    }
    n
}

/// Per-threshold confusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    /// Foreground pixels of the ground truth.
    pub positives: u64,
    pub total: u64,
}

impl Confusion {
    pub fn fn_(&self, k: usize) -> u64 {
        self.positives - self.tp[k]
    }

    pub fn tn(&self, k: usize) -> u64 {
        self.total - self.positives - self.fp[k]
    }
}

pub fn confusion(s: ArrayView2<f32>, g: ArrayView2<f32>) -> Result<Confusion> {
    check_shapes(s, g)?;
    // hist[n] counts pixels positive at exactly the first n thresholds
    let mut hist_fg = vec![0u64; NUM_THRESHOLDS + 1];
    let mut hist_bg = vec![0u64; NUM_THRESHOLDS + 1];
    Zip::from(s).and(g).for_each(|&v, &gv| {
        let n = thresholds_below(v as f64);
        if is_fg(gv) {
            hist_fg[n] += 1;
        } else {
            hist_bg[n] += 1;
        }
    });
    let mut tp = vec![0u64; NUM_THRESHOLDS];
    let mut fp = vec![0u64; NUM_THRESHOLDS];
    let (mut acc_tp, mut acc_fp) = (0u64, 0u64);
    for k in (0..NUM_THRESHOLDS).rev() {
        acc_tp += hist_fg[k + 1];
        acc_fp += hist_bg[k + 1];
        tp[k] = acc_tp;
        fp[k] = acc_fp;
    }
    let positives = hist_fg.iter().sum();
    Ok(Confusion {
        tp,
        fp,
        positives,
        total: s.len() as u64,
    })
}

pub fn f_beta(p: f64, r: f64) -> f64 {
    let denom = BETA2 * p + r;
    if denom > 0.0 {
        (1.0 + BETA2) * p * r / denom
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn f_curve(&self) -> Vec<f64> {
        self.precision.iter().zip(&self.recall).map(|(&p, &r)| f_beta(p, r)).collect()
    }

    pub fn max_f(&self) -> f64 {
        self.f_curve().into_iter().fold(0.0, f64::max)
    }
}

/// Precision and recall per threshold; precision is 0 when nothing is
/// predicted positive. `None` when the ground truth has no foreground.
pub fn pr_curve(s: ArrayView2<f32>, g: ArrayView2<f32>) -> Result<Option<PrCurve>> {
    let c = confusion(s, g)?;
    if c.positives == 0 {
        return Ok(None);
    }
    let mut precision = Vec::with_capacity(NUM_THRESHOLDS);
    let mut recall = Vec::with_capacity(NUM_THRESHOLDS);
    for k in 0..NUM_THRESHOLDS {
        let pred = c.tp[k] + c.fp[k];
        precision.push(if pred > 0 { c.tp[k] as f64 / pred as f64 } else { 0.0 });
        recall.push(c.tp[k] as f64 / c.positives as f64);
    }
    Ok(Some(PrCurve { precision, recall }))
}

/// Single-image precision/recall curve and its maximum F-measure.
pub fn f_measure_curve(s: ArrayView2<f32>, g: ArrayView2<f32>) -> Result<Option<(PrCurve, f64)>> {
    Ok(pr_curve(s, g)?.map(|c| {
        let m = c.max_f();
        (c, m)
    }))
}

/// E-measure of a binary prediction given confusion counts at one threshold.
fn e_from_counts(tp: u64, fp: u64, positives: u64, total: u64) -> f64 {
    let n = total as f64;
    let pred_pos = (tp + fp) as f64;
    if positives == 0 {
        return (n - pred_pos) / n;
    }
    if positives == total {
        return pred_pos / n;
    }
    let mean_s = pred_pos / n;
    let mean_g = positives as f64 / n;
    let enhanced = |s: f64, g: f64| {
        let (ps, pg) = (s - mean_s, g - mean_g);
        let xi = 2.0 * ps * pg / (ps * ps + pg * pg + f64::EPSILON);
        (xi + 1.0).powi(2) / 4.0
    };
    let fn_ = positives - tp;
    let tn = total - positives - fp;
    (tp as f64 * enhanced(1.0, 1.0)
        + fp as f64 * enhanced(1.0, 0.0)
        + fn_ as f64 * enhanced(0.0, 1.0)
        + tn as f64 * enhanced(0.0, 0.0))
        / n
}

/// E-measure per threshold and its maximum.
pub fn e_measure_curve(s: ArrayView2<f32>, g: ArrayView2<f32>) -> Result<(Vec<f64>, f64)> {
    let c = confusion(s, g)?;
    let curve: Vec<f64> = (0..NUM_THRESHOLDS)
        .map(|k| e_from_counts(c.tp[k], c.fp[k], c.positives, c.total))
        .collect();
    let max = curve.iter().copied().fold(0.0, f64::max);
    Ok((curve, max))
}

/// E-measure of an already binary prediction (values above 0.5 positive).
pub fn e_measure_binary(s: ArrayView2<f32>, g: ArrayView2<f32>) -> Result<f64> {
    check_shapes(s, g)?;
    let (mut tp, mut fp, mut pos) = (0u64, 0u64, 0u64);
    Zip::from(s).and(g).for_each(|&sv, &gv| {
        let (sp, gp) = (is_fg(sv), is_fg(gv));
        tp += (sp && gp) as u64;
        fp += (sp && !gp) as u64;
        pos += gp as u64;
    });
    Ok(e_from_counts(tp, fp, pos, s.len() as u64).clamp(0.0, 1.0))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    let std = if n > 1 {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std, n)
}

fn object_score(mean: f64, std: f64) -> f64 {
    2.0 * mean / (mean * mean + 1.0 + std + f64::EPSILON)
}

fn s_object(s: ArrayView2<f32>, g: ArrayView2<f32>) -> f64 {
    let pairs = || s.iter().zip(g.iter()).map(|(&a, &b)| (a as f64, is_fg(b)));
    let fg = pairs().filter(|p| p.1).map(|p| p.0);
    let bg = pairs().filter(|p| !p.1).map(|p| 1.0 - p.0);
    let (mf, sf, nf) = mean_std(fg);
    let (mb, sb, _) = mean_std(bg);
    let u = nf as f64 / s.len() as f64;
    u * object_score(mf, sf) + (1.0 - u) * object_score(mb, sb)
}

/// SSIM-style similarity of one block.
fn block_ssim(s: ArrayView2<f32>, g: ArrayView2<f32>) -> f64 {
    let n = s.len() as f64;
    let gf = g.mapv(|v| if is_fg(v) { 1.0 } else { 0.0 });
    let sd = s.mapv(|v| v as f64);
    let x = sd.sum() / n;
    let y = gf.sum() / n;
    let denom = n - 1.0 + f64::EPSILON;
    let sx2 = sd.iter().map(|v| (v - x).powi(2)).sum::<f64>() / denom;
    let sy2 = gf.iter().map(|v| (v - y).powi(2)).sum::<f64>() / denom;
    let sxy = sd.iter().zip(gf.iter()).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point `(x, y)`: the foreground centroid in 1-based pixel units,
/// rounded half away from zero; blocks are `[0, x)` and `[x, w)` (same for y).
pub fn centroid(g: ArrayView2<f32>) -> (usize, usize) {
    let (h, w) = g.dim();
    let mut total = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((r, c), &v) in g.indexed_iter() {
        if is_fg(v) {
            total += 1.0;
            sx += (c + 1) as f64;
            sy += (r + 1) as f64;
        }
    }
    if total == 0.0 {
        ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize)
    } else {
        ((sx / total).round() as usize, (sy / total).round() as usize)
    }
}

fn s_region(s: ArrayView2<f32>, g: ArrayView2<f32>) -> f64 {
    let (h, w) = g.dim();
    let (x, y) = centroid(g);
    let area = (h * w) as f64;
    let mut score = 0.0;
    for (r0, r1) in [(0, y), (y, h)] {
        for (c0, c1) in [(0, x), (x, w)] {
            if r1 <= r0 || c1 <= c0 {
                continue;
            }
            let weight = ((r1 - r0) * (c1 - c0)) as f64 / area;
            let sb = s.slice(ndarray::s![r0..r1, c0..c1]);
            let gb = g.slice(ndarray::s![r0..r1, c0..c1]);
            score += weight * block_ssim(sb, gb);
        }
    }
    score
}

/// Structure measure, `alpha * object + (1 - alpha) * region`, clamped to
/// [0, 1]. An all-background ground truth scores `1 - mean(S)`, an
/// all-foreground one `mean(S)`.
pub fn s_measure(s: ArrayView2<f32>, g: ArrayView2<f32>, alpha: f64) -> Result<f64> {
    check_shapes(s, g)?;
    let n = s.len() as f64;
    let fg = g.iter().filter(|&&v| is_fg(v)).count() as f64;
    let mean_s = s.iter().map(|&v| v as f64).sum::<f64>() / n;
    let score = if fg == 0.0 {
        1.0 - mean_s
    } else if fg == n {
        mean_s
    } else {
        alpha * s_object(s, g) + (1.0 - alpha) * s_region(s, g)
    };
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Min-max normalise each prediction before scoring.
    pub normalize: bool,
    pub smeasure_alpha: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            smeasure_alpha: DEFAULT_SMEASURE_ALPHA,
        }
    }
}

/// Per-image min-max normalisation; constant maps are returned unchanged.
pub fn min_max_normalize(s: ArrayView2<f32>) -> Array2<f32> {
    let lo = s.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo > f32::EPSILON {
        s.mapv(|v| (v - lo) / (hi - lo))
    } else {
        s.to_owned()
    }
}

/// Scores of a single image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub mae: f64,
    pub s_alpha: f64,
    pub e_curve: Vec<f64>,
    /// `None` when the ground truth is empty.
    pub pr: Option<PrCurve>,
}

pub fn score_image(s: ArrayView2<f32>, g: ArrayView2<f32>, opts: &EvalOptions) -> Result<ImageScores> {
    let owned;
    let s = if opts.normalize {
        owned = min_max_normalize(s);
        owned.view()
    } else {
        s
    };
    Ok(ImageScores {
        mae: mae(s, g)?,
        s_alpha: s_measure(s, g, opts.smeasure_alpha)?,
        e_curve: e_measure_curve(s, g)?.0,
        pr: pr_curve(s, g)?,
    })
}

/// Dataset-level metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub s_alpha: f64,
    pub max_f: f64,
    pub max_e: f64,
    pub mae: f64,
    /// Dataset-mean precision per threshold.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub e_curve: Vec<f64>,
    pub n_samples: usize,
    /// Images with empty ground truth, left out of the precision/recall means.
    pub n_empty_gt: usize,
    pub pr_averaging: String,
    pub model_id: Option<String>,
    pub split_id: Option<String>,
}

/// Streaming aggregation of [`ImageScores`].
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    n: usize,
    n_pr: usize,
    n_empty: usize,
    mae: f64,
    s_alpha: f64,
    e: Vec<f64>,
    p: Vec<f64>,
    r: Vec<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self {
            e: vec![0.0; NUM_THRESHOLDS],
            p: vec![0.0; NUM_THRESHOLDS],
            r: vec![0.0; NUM_THRESHOLDS],
            ..Self::default()
        }
    }

    pub fn add(&mut self, img: &ImageScores) {
        self.n += 1;
        self.mae += img.mae;
        self.s_alpha += img.s_alpha;
        for (a, v) in self.e.iter_mut().zip(&img.e_curve) {
            *a += v;
        }
        match &img.pr {
            Some(pr) => {
                self.n_pr += 1;
                for k in 0..NUM_THRESHOLDS {
                    self.p[k] += pr.precision[k];
                    self.r[k] += pr.recall[k];
                }
            }
            None => self.n_empty += 1,
        }
    }

    pub fn add_pair(&mut self, s: ArrayView2<f32>, g: ArrayView2<f32>, opts: &EvalOptions) -> Result<()> {
        self.add(&score_image(s, g, opts)?);
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("no images to evaluate".into()));
        }
        let n = self.n as f64;
        let avg = |v: &[f64], d: usize| -> Vec<f64> {
            v.iter().map(|x| if d > 0 { x / d as f64 } else { 0.0 }).collect()
        };
        let precision = avg(&self.p, self.n_pr);
        let recall = avg(&self.r, self.n_pr);
        let e_curve = avg(&self.e, self.n);
        let max_f = precision
            .iter()
            .zip(&recall)
            .map(|(&p, &r)| f_beta(p, r))
            .fold(0.0, f64::max);
        let max_e = e_curve.iter().copied().fold(0.0, f64::max).clamp(0.0, 1.0);
        Ok(MetricReport {
            s_alpha: (self.s_alpha / n).clamp(0.0, 1.0),
            max_f,
            max_e,
            mae: self.mae / n,
            precision,
            recall,
            e_curve,
            n_samples: self.n,
            n_empty_gt: self.n_empty,
            pr_averaging: "dataset-mean".into(),
            model_id: None,
            split_id: None,
        })
    }
}

/// Aggregates `(prediction, ground truth)` pairs.
pub fn evaluate_pairs<'a>(
    pairs: impl IntoIterator<Item = (ArrayView2<'a, f32>, ArrayView2<'a, f32>)>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for (s, g) in pairs {
        acc.add_pair(s, g, opts)?;
    }
    acc.finish()
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per threshold: `threshold,precision,recall,f,e`.
    pub fn write_curves_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "precision", "recall", "f", "e"])?;
        for k in 0..NUM_THRESHOLDS {
            w.write_record([
                format!("{:.6}", threshold(k)),
                format!("{:.6}", self.precision[k]),
                format!("{:.6}", self.recall[k]),
                format!("{:.6}", f_beta(self.precision[k], self.recall[k])),
                format!("{:.6}", self.e_curve[k]),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Single summary row with a header.
    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n_samples", "s_alpha", "max_f", "max_e", "mae"])?;
        w.write_record([
            self.n_samples.to_string(),
            format!("{:.6}", self.s_alpha),
            format!("{:.6}", self.max_f),
            format!("{:.6}", self.max_e),
            format!("{:.6}", self.mae),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Outcome of scoring a directory of saved maps.
#[derive(Debug, Clone)]
pub struct DirectoryEvaluation {
    pub report: MetricReport,
    /// Files present on only one side, by file stem.
    pub skipped: Vec<String>,
}

fn image_stems(dir: &Path) -> Result<std::collections::BTreeMap<String, PathBuf>> {
    let mut out = std::collections::BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Scores every prediction in `pred_dir` against the mask of the same stem
/// in `gt_dir`. Predictions of a different size are resized to the mask.
pub fn evaluate_directories(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<DirectoryEvaluation> {
    let preds = image_stems(pred_dir)?;
    let gts = image_stems(gt_dir)?;
    let mut skipped = Vec::new();
    let mut acc = MetricAccumulator::new();
    for (stem, p) in &preds {
        let Some(gpath) = gts.get(stem) else {
            skipped.push(stem.clone());
            continue;
        };
        let g = read_mask(gpath)?;
        let mut s = read_saliency(p)?.map;
        if s.dim() != g.dim() {
            s = resize_plane(s.view(), g.nrows(), g.ncols());
        }
        acc.add_pair(s.view(), g.view(), opts)?;
    }
    skipped.extend(gts.keys().filter(|k| !preds.contains_key(*k)).cloned());
    skipped.sort();
    if !skipped.is_empty() {
        log::warn!("{} unmatched files skipped: {}", skipped.len(), skipped.join(", "));
    }
    Ok(DirectoryEvaluation {
        report: acc.finish()?,
        skipped,
    })
}
