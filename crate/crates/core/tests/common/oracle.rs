//! Straight transcriptions of the metric definitions, one pixel at a time.

use ndarray::Array2;

pub fn grid(a: &Array2<f32>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

pub fn mae(s: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for (rs, rg) in s.iter().zip(g) {
        for (a, b) in rs.iter().zip(rg) {
            sum += (a - b).abs();
            n += 1.0;
        }
    }
    sum / n
}

/// `(tp, fp, fn, tn)` with prediction positive when `s > k / 255`.
pub fn counts(s: &[Vec<f64>], g: &[Vec<f64>], k: usize) -> (u64, u64, u64, u64) {
    let t = k as f64 / 255.0;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (rs, rg) in s.iter().zip(g) {
        for (&a, &b) in rs.iter().zip(rg) {
            match (a > t, b > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    (tp, fp, fn_, tn)
}

pub fn precision_recall(s: &[Vec<f64>], g: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    (0..256)
        .map(|k| {
            let (tp, fp, fn_, _) = counts(s, g, k);
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            (p, tp as f64 / (tp + fn_) as f64)
        })
        .unzip()
}

pub fn f_beta(p: f64, r: f64, beta2: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / (beta2 * p + r)
    }
}

/// Enhanced-alignment measure of a binary map `b` against `g`.
pub fn e_binary(b: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let h = g.len();
    let w = g[0].len();
    let n = (h * w) as f64;
    let gsum: f64 = g.iter().flatten().sum();
    let bsum: f64 = b.iter().flatten().sum();
    if gsum == 0.0 {
        return b.iter().flatten().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if gsum == n {
        return bsum / n;
    }
    let (mb, mg) = (bsum / n, gsum / n);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (fb, fg) = (b[y][x] - mb, g[y][x] - mg);
            let align = 2.0 * fb * fg / (fb * fb + fg * fg + f64::EPSILON);
            total += (align + 1.0).powi(2) / 4.0;
        }
    }
    total / n
}

pub fn binarize(s: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let t = k as f64 / 255.0;
    s.iter().map(|r| r.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect()).collect()
}

fn mean_std_sample(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn object_part(values: &[f64]) -> f64 {
    let (m, sd) = mean_std_sample(values);
    2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
}

fn ssim(s: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let xs: Vec<f64> = s.iter().flatten().copied().collect();
    let ys: Vec<f64> = g.iter().flatten().copied().collect();
    let n = xs.len() as f64;
    let x = xs.iter().sum::<f64>() / n;
    let y = ys.iter().sum::<f64>() / n;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in xs.iter().zip(&ys) {
        sx += (a - x) * (a - x);
        sy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let d = n - 1.0 + f64::EPSILON;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block(a: &[Vec<f64>], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    a[rows].iter().map(|r| r[cols.clone()].to_vec()).collect()
}

/// Structure measure as published with its reference code: 1-based
/// foreground centroid (rounded half away from zero), blocks
/// `1..=X` / `X+1..=W` in 1-based indexing, sample standard deviations.
pub fn s_measure(s: &[Vec<f64>], g: &[Vec<f64>], alpha: f64) -> f64 {
    let h = g.len();
    let w = g[0].len();
    let gb: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect()).collect();
    let area: f64 = gb.iter().flatten().sum();
    let n = (h * w) as f64;
    let mean_s = s.iter().flatten().sum::<f64>() / n;
    if area == 0.0 {
        return (1.0 - mean_s).clamp(0.0, 1.0);
    }
    if area == n {
        return mean_s.clamp(0.0, 1.0);
    }
    // object term
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if gb[y][x] == 1.0 {
                fg.push(s[y][x]);
            } else {
                bg.push(1.0 - s[y][x]);
            }
        }
    }
    let u = area / n;
    let object = u * object_part(&fg) + (1.0 - u) * object_part(&bg);
    // region term
    let (mut cx, mut cy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            cx += gb[y][x] * (x + 1) as f64;
            cy += gb[y][x] * (y + 1) as f64;
        }
    }
    let xc = (cx / area).round() as usize;
    let yc = (cy / area).round() as usize;
    let mut region = 0.0;
    for (r0, r1) in [(0, yc), (yc, h)] {
        for (c0, c1) in [(0, xc), (xc, w)] {
            if r1 == r0 || c1 == c0 {
                continue;
            }
            let wgt = ((r1 - r0) * (c1 - c0)) as f64 / n;
            region += wgt * ssim(&block(s, r0..r1, c0..c1), &block(&gb, r0..r1, c0..c1));
        }
    }
    (alpha * object + (1.0 - alpha) * region).clamp(0.0, 1.0)
}

/// Exhaustive Otsu: for every cut `t` in 1..=255 on the 256-level grid,
/// the within-class variance computed from the pixel values directly.
/// Returns the lowest minimiser and its variance.
pub fn otsu(s: &[Vec<f64>]) -> Option<(usize, f64)> {
    let bins: Vec<f64> = s.iter().flatten().map(|v| (v.clamp(0.0, 1.0) * 255.0).round()).collect();
    let n = bins.len() as f64;
    let mut best: Option<(usize, f64)> = None;
    for t in 1..256usize {
        let lo: Vec<f64> = bins.iter().copied().filter(|&b| b < t as f64).collect();
        let hi: Vec<f64> = bins.iter().copied().filter(|&b| b >= t as f64).collect();
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        let within = lo.len() as f64 / n * var(&lo) + hi.len() as f64 / n * var(&hi);
        if best.is_none_or(|(_, b)| within < b) {
            best = Some((t, within));
        }
    }
    best
}

pub fn within_variance(s: &[Vec<f64>], t: usize) -> f64 {
    let bins: Vec<f64> = s.iter().flatten().map(|v| (v.clamp(0.0, 1.0) * 255.0).round()).collect();
    let n = bins.len() as f64;
    let lo: Vec<f64> = bins.iter().copied().filter(|&b| b < t as f64).collect();
    let hi: Vec<f64> = bins.iter().copied().filter(|&b| b >= t as f64).collect();
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    };
    lo.len() as f64 / n * var(&lo) + hi.len() as f64 / n * var(&hi)
}
