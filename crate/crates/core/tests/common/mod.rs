#![allow(dead_code)]

use bbsnet::data_io::RgbdSample;
use bbsnet::synth::{generate, Style, SynthConfig};
use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracle;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal-ish values from a seeded generator (sum of uniforms).
pub fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).sum::<f64>() * 0.866)
        .collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn uniform_map(h: usize, w: usize, r: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |_| r.random_range(0.0f32..=1.0))
}

/// Binary mask with a random rectangle of foreground and some speckle, so
/// that foreground and background are both usually present.
pub fn random_mask(h: usize, w: usize, r: &mut ChaCha8Rng) -> Array2<f32> {
    let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
    let (y1, x1) = (r.random_range(y0..h) + 1, r.random_range(x0..w) + 1);
    let speckle = r.random_range(0.0..0.2);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let inside = y >= y0 && y < y1 && x >= x0 && x < x1;
        let flip = r.random_bool(speckle);
        if inside ^ flip {
            1.0
        } else {
            0.0
        }
    })
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn bit_identical(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims() && to_vec(a).iter().zip(to_vec(b)).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Scalar probe `sum(y * w)` with fixed random weights, so every output
/// element contributes to the gradient with a generic coefficient.
pub fn probe(y: &Tensor, seed: u64) -> Tensor {
    let w = randn(y.dims(), seed, y.dtype());
    (y * w).unwrap().sum_all().unwrap()
}

/// Absolute floor of the relative error denominator; gradients smaller than
/// this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-6;

fn set_element(var: &Var, idx: usize, value: f64) {
    let t = var.as_tensor();
    let mut data = to_vec(t);
    data[idx] = value;
    let new = Tensor::from_vec(data, t.dims(), t.device()).unwrap().to_dtype(t.dtype()).unwrap();
    var.set(&new).unwrap();
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

/// Compares autodiff gradients of the scalar `f` with central differences at
/// `coords` (variable index, flat element index). Variables are restored.
pub fn grad_check(f: &dyn Fn() -> Tensor, vars: &[(String, Var)], coords: &[(usize, usize)]) -> GradCheck {
    let loss = f();
    let grads = loss.backward().unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|(_, v)| match grads.get(v.as_tensor()) {
            Some(g) => to_vec(g),
            None => vec![0.0; v.as_tensor().elem_count()],
        })
        .collect();
    let eval = || to_vec(&f())[0];
    let mut out = GradCheck {
        max_rel: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for &(vi, idx) in coords {
        let (name, var) = &vars[vi];
        let orig = to_vec(var.as_tensor())[idx];
        set_element(var, idx, orig + FD_STEP);
        let up = eval();
        set_element(var, idx, orig - FD_STEP);
        let down = eval();
        set_element(var, idx, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[vi][idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        out.checked += 1;
        if rel > out.max_rel {
            out.max_rel = rel;
            out.worst = format!("{name}[{idx}]: autodiff {a:e} vs numeric {numeric:e}");
        }
    }
    out
}

/// `per_var` random coordinates in every variable.
pub fn coords_per_var(vars: &[(String, Var)], per_var: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (i, (_, v)) in vars.iter().enumerate() {
        let n = v.as_tensor().elem_count();
        for _ in 0..per_var.min(n) {
            out.push((i, r.random_range(0..n)));
        }
    }
    out
}

/// `count` coordinates drawn uniformly over all elements of all variables.
pub fn coords_uniform(vars: &[(String, Var)], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = vars.iter().map(|(_, v)| v.as_tensor().elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let mut k = r.random_range(0..total);
            let mut vi = 0;
            while k >= sizes[vi] {
                k -= sizes[vi];
                vi += 1;
            }
            (vi, k)
        })
        .collect()
}

pub fn input_var(shape: &[usize], seed: u64) -> Var {
    Var::from_tensor(&randn(shape, seed, DType::F64)).unwrap()
}

/// A small style-A corpus with informative depth.
pub fn toy_corpus(count: usize, side: usize, seed: u64) -> Vec<RgbdSample> {
    generate(&SynthConfig::new(Style::a(), count, side, seed)).unwrap()
}
