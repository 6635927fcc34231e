//! Binarisation of predicted saliency maps.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Upper clamp margin of the adaptive threshold.
pub const ADAPTIVE_EPS: f64 = 1.0 / 255.0;
pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adp,
    Otsu,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Adp => "adp",
            Method::Otsu => "otsu",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adp" | "adaptive" => Ok(Method::Adp),
            "otsu" => Ok(Method::Otsu),
            other => Err(Error::InvalidArgument(format!("unknown post-processing method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedMap {
    /// Values in {0, 1}.
    pub map: Array2<f32>,
    pub method: Method,
    pub threshold: f64,
}

fn binarize(s: ArrayView2<f32>, t: f64) -> Array2<f32> {
    s.mapv(|v| if v as f64 >= t { 1.0 } else { 0.0 })
}

/// Foreground where `S >= min(2 * mean(S), 1 - 1/255)`.
pub fn adaptive_threshold(s: ArrayView2<f32>) -> BinarizedMap {
    let mean = s.iter().map(|&v| v as f64).sum::<f64>() / s.len().max(1) as f64;
    let t = (2.0 * mean).min(1.0 - ADAPTIVE_EPS);
    BinarizedMap {
        map: binarize(s, t),
        method: Method::Adp,
        threshold: t,
    }
}

/// Bin of a value in [0, 1] on the 256-level grid.
pub fn quantize(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * 255.0).round() as usize).min(OTSU_BINS - 1)
}

pub fn histogram(s: ArrayView2<f32>) -> [u64; OTSU_BINS] {
    let mut h = [0u64; OTSU_BINS];
    for &v in s {
        h[quantize(v)] += 1;
    }
    h
}

/// Otsu's level on a 256-bin histogram: the `k` in `1..=255` maximising the
/// between-class variance of `{bins < k}` and `{bins >= k}`; ties keep the
/// lowest `k`. `None` when no split has both classes populated.
pub fn otsu_level(hist: &[u64; OTSU_BINS]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for k in 1..OTSU_BINS {
        w0 += hist[k - 1];
        sum0 += (k - 1) as f64 * hist[k - 1] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let (p0, p1) = (w0 as f64 / total as f64, w1 as f64 / total as f64);
        let (m0, m1) = (sum0 / w0 as f64, (sum_all - sum0) / w1 as f64);
        let var = p0 * p1 * (m0 - m1).powi(2);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((k, var));
        }
    }
    best.map(|(k, _)| k)
}

/// Otsu binarisation. The returned threshold is `k / 255` and a pixel is
/// foreground when its bin is at least `k`. A constant map has no split: the
/// threshold is 0 and every pixel is foreground.
pub fn otsu_threshold(s: ArrayView2<f32>) -> BinarizedMap {
    match otsu_level(&histogram(s)) {
        Some(k) => BinarizedMap {
            map: s.mapv(|v| if quantize(v) >= k { 1.0 } else { 0.0 }),
            method: Method::Otsu,
            threshold: k as f64 / 255.0,
        },
        None => {
            log::warn!("Otsu threshold undefined for a constant map; returning all foreground");
            BinarizedMap {
                map: Array2::ones(s.raw_dim()),
                method: Method::Otsu,
                threshold: 0.0,
            }
        }
    }
}

pub fn apply(method: Method, s: ArrayView2<f32>) -> BinarizedMap {
    match method {
        Method::Adp => adaptive_threshold(s),
        Method::Otsu => otsu_threshold(s),
    }
}
