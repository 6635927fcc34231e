//! Procedural RGB-D corpora with controllable distribution shift.
//!
//! Every image shows one salient object on a textured background together
//! with a few distractor objects. The depth map places the salient object in
//! front of everything else ([`DepthMode::Informative`]) or is an unrelated
//! smooth random field ([`DepthMode::Random`]). Styles differ in palette,
//! shape vocabulary and depth polarity, so two styles behave like two
//! datasets collected under different conventions.

use std::f32::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{normalize_depth, write_sample, RgbdSample};
use crate::Result;

/// Bumped whenever the generator's output for a given seed changes.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ellipse,
    Rect,
}

impl Shape {
    fn contains(self, dx: f32, dy: f32, rx: f32, ry: f32) -> bool {
        match self {
            Shape::Ellipse => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
            Shape::Rect => dx.abs() <= rx && dy.abs() <= ry,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub name: String,
    pub background: [f32; 3],
    pub object_colors: Vec<[f32; 3]>,
    pub object_shape: Shape,
    pub distractor_colors: Vec<[f32; 3]>,
    pub distractor_shape: Shape,
    /// Spatial frequency of the background texture, in cycles per image.
    pub texture_freq: f32,
    /// Whether larger depth values mean closer to the camera.
    pub near_is_bright: bool,
}

impl Style {
    /// Warm ellipses in front of cool rectangles on green, near = bright.
    pub fn a() -> Self {
        Self {
            name: "A".into(),
            background: [0.30, 0.55, 0.30],
            object_colors: vec![[0.90, 0.25, 0.20], [0.95, 0.60, 0.15]],
            object_shape: Shape::Ellipse,
            distractor_colors: vec![[0.20, 0.35, 0.90], [0.15, 0.75, 0.85]],
            distractor_shape: Shape::Rect,
            texture_freq: 3.0,
            near_is_bright: true,
        }
    }

    /// The roles of A swapped on a purple background, near = dark.
    pub fn b() -> Self {
        Self {
            name: "B".into(),
            background: [0.55, 0.35, 0.60],
            object_colors: vec![[0.20, 0.35, 0.90], [0.15, 0.75, 0.85]],
            object_shape: Shape::Rect,
            distractor_colors: vec![[0.90, 0.25, 0.20], [0.95, 0.60, 0.15]],
            distractor_shape: Shape::Ellipse,
            texture_freq: 6.0,
            near_is_bright: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    /// The salient object is the nearest surface.
    Informative,
    /// Smooth noise unrelated to the scene.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub style: Style,
    pub count: usize,
    pub side: usize,
    pub seed: u64,
    pub depth_mode: DepthMode,
    /// When false the salient object is drawn with the distractors' colours
    /// and shape, so RGB alone cannot tell it apart.
    pub rgb_cue: bool,
    pub max_distractors: usize,
    /// Prefix of the sample ids.
    pub name: String,
}

impl SynthConfig {
    pub fn new(style: Style, count: usize, side: usize, seed: u64) -> Self {
        Self {
            name: style.name.to_ascii_lowercase(),
            style,
            count,
            side,
            seed,
            depth_mode: DepthMode::Informative,
            rgb_cue: true,
            max_distractors: 2,
        }
    }
}

struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    shape: Shape,
    color: [f32; 3],
    depth: f32,
}

impl Blob {
    fn contains(&self, x: f32, y: f32) -> bool {
        self.shape.contains(x - self.cx, y - self.cy, self.rx, self.ry)
    }
}

/// A random palette entry, perturbed per channel.
fn pick_color(rng: &mut ChaCha8Rng, palette: &[[f32; 3]], amount: f32) -> [f32; 3] {
    let c = palette[rng.random_range(0..palette.len())];
    jitter(rng, c, amount)
}

fn jitter(rng: &mut ChaCha8Rng, c: [f32; 3], amount: f32) -> [f32; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Sum of a few random plane waves, scaled to roughly [0, 1].
fn smooth_field(rng: &mut ChaCha8Rng, n: usize) -> Array2<f32> {
    let waves: Vec<(f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-2.5f32..2.5) * 2.0 * PI / n as f32,
                rng.random_range(-2.5f32..2.5) * 2.0 * PI / n as f32,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    Array2::from_shape_fn((n, n), |(y, x)| {
        let v: f32 = waves.iter().map(|(fx, fy, p)| (fx * x as f32 + fy * y as f32 + p).sin()).sum();
        0.5 + v / 8.0
    })
}

/// Generates sample `index` of the corpus; samples are independent of each
/// other and of `count`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<RgbdSample> {
    let n = cfg.side;
    let nf = n as f32;
    let style = &cfg.style;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let (obj_colors, obj_shape) = if cfg.rgb_cue {
        (&style.object_colors, style.object_shape)
    } else {
        (&style.distractor_colors, style.distractor_shape)
    };
    let r = rng.random_range(0.16..0.28) * nf;
    let aspect: f32 = rng.random_range(0.75..1.33);
    let object = Blob {
        cx: rng.random_range(r..nf - r),
        cy: rng.random_range(r..nf - r),
        rx: r * aspect.min(1.0),
        ry: r / aspect.max(1.0),
        shape: obj_shape,
        color: pick_color(&mut rng, obj_colors, 0.05),
        depth: rng.random_range(0.75..0.95),
    };
    let n_distractors = if cfg.max_distractors == 0 {
        0
    } else {
        rng.random_range(1..=cfg.max_distractors)
    };
    let mut distractors = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        let rd = rng.random_range(0.08..0.16) * nf;
        // keep distractors mostly clear of the object; give up after a few tries
        let mut pos = (0.0, 0.0);
        for _ in 0..20 {
            pos = (rng.random_range(rd..nf - rd), rng.random_range(rd..nf - rd));
            let d = ((pos.0 - object.cx).powi(2) + (pos.1 - object.cy).powi(2)).sqrt();
            if d > r + rd {
                break;
            }
        }
        distractors.push(Blob {
            cx: pos.0,
            cy: pos.1,
            rx: rd,
            ry: rd * rng.random_range(0.7..1.0),
            shape: style.distractor_shape,
            color: pick_color(&mut rng, &style.distractor_colors, 0.05),
            depth: rng.random_range(0.30..0.45),
        });
    }

    let bg = jitter(&mut rng, style.background, 0.05);
    let theta = rng.random_range(0.0..PI);
    let (tx, ty) = (theta.cos(), theta.sin());
    let phase = rng.random_range(0.0..2.0 * PI);
    let k = 2.0 * PI * style.texture_freq / nf;

    let mut rgb = Array3::<f32>::zeros((n, n, 3));
    let mut depth = Array2::<f32>::zeros((n, n));
    let mut gt = Array2::<f32>::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let tex = 0.08 * (k * (tx * xf + ty * yf) + phase).sin();
            let mut color = bg.map(|c| c + tex);
            // receding floor: far at the top, nearer at the bottom
            let mut d = 0.10 + 0.20 * yf / nf;
            for b in &distractors {
                if b.contains(xf, yf) {
                    color = b.color;
                    d = b.depth;
                }
            }
            if object.contains(xf, yf) {
                let shade = 1.0 - 0.15 * ((xf - object.cx) / object.rx.max(1.0)).abs();
                color = object.color.map(|c| c * shade);
                d = object.depth;
                gt[[y, x]] = 1.0;
            }
            for c in 0..3 {
                rgb[[y, x, c]] = (color[c] + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
            depth[[y, x]] = d + rng.random_range(-0.03..0.03);
        }
    }
    if cfg.depth_mode == DepthMode::Random {
        depth = smooth_field(&mut rng, n);
    }
    if !style.near_is_bright {
        depth.mapv_inplace(|v| 1.0 - v);
    }
    normalize_depth(&mut depth);
    RgbdSample::new(format!("{}_{index:04}", cfg.name), rgb, depth, gt)
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<RgbdSample>> {
    (0..cfg.count).map(|i| generate_sample(cfg, i)).collect()
}

/// Writes a generated corpus in the `RGB/ depth/ GT/` layout.
pub fn write_corpus(cfg: &SynthConfig, root: impl AsRef<Path>) -> Result<Vec<RgbdSample>> {
    let samples = generate(cfg)?;
    for s in &samples {
        write_sample(root.as_ref(), s)?;
    }
    Ok(samples)
}
