use candle_core::{DType, Device, Tensor, D};

use crate::{Error, Result};

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Row-major `(n_out, n_in)` linear-interpolation weights.
///
/// With `align_corners` the end samples coincide; otherwise pixel centres are
/// aligned (half-pixel convention) and out-of-range taps are clamped.
pub fn interp_weights(n_in: usize, n_out: usize, align_corners: bool) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        let src = if align_corners {
            if n_out == 1 {
                0.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            }
        } else {
            ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
        };
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        m[i * n_in + lo] += 1.0 - frac;
        m[i * n_in + hi] += frac;
    }
    m
}

fn weight_tensor(n_in: usize, n_out: usize, align: bool, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(interp_weights(n_in, n_out, align), (n_out, n_in), dev)?.to_dtype(dtype)?)
}

/// Bilinear resize of an NCHW tensor, expressed as two matrix products so it
/// is differentiable through candle's autograd.
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize, align_corners: bool) -> Result<Tensor> {
    let (_, _, h_in, w_in) = x.dims4()?;
    if (h_in, w_in) == (h, w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let y = if w_in == w {
        x.clone()
    } else {
        let mw = weight_tensor(w_in, w, align_corners, x.dtype(), dev)?;
        x.contiguous()?.broadcast_matmul(&mw.t()?.contiguous()?)?
    };
    let y = if h_in == h {
        y
    } else {
        let mh = weight_tensor(h_in, h, align_corners, x.dtype(), dev)?;
        mh.broadcast_matmul(&y.contiguous()?)?
    };
    Ok(y)
}

/// Resizes `x` to the spatial size of `like` (feature upsampling convention).
pub fn resize_to(x: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = like.dims4()?;
    resize_bilinear(x, h, w, true)
}

fn every_other(x: &Tensor, dim: usize, start: usize, n_out: usize) -> Result<Tensor> {
    let t = x.narrow(dim, start, 2 * n_out)?;
    let mut shape = t.dims().to_vec();
    shape[dim] = n_out;
    shape.insert(dim + 1, 2);
    Ok(t.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// 3x3 max pooling, stride 2, padding 1, for non-negative (post-ReLU) input.
///
/// Padding uses zeros, which is exact only when `x >= 0`.
pub fn max_pool_3x3_s2_p1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool expects even sides, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let p = x.pad_with_zeros(D::Minus2, 1, 1)?.pad_with_zeros(D::Minus1, 1, 1)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = every_other(&p, 2, dy, ho)?;
        for dx in 0..3 {
            let cand = every_other(&rows, 3, dx, wo)?;
            out = Some(match out {
                None => cand,
                Some(m) => m.maximum(&cand)?,
            });
        }
    }
    Ok(out.expect("nine candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_rows_sum_to_one() {
        for &(a, b, al) in &[(4, 8, true), (4, 8, false), (7, 3, false), (5, 5, true), (1, 4, true)] {
            let m = interp_weights(a, b, al);
            for r in 0..b {
                let s: f64 = m[r * a..(r + 1) * a].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn align_corners_keeps_endpoints() {
        let x = Tensor::arange(0f64, 4., &Device::Cpu).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let y = resize_bilinear(&x, 1, 7, true).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y.len(), 7);
        assert!((y[0] - 0.0).abs() < 1e-12 && (y[6] - 3.0).abs() < 1e-12);
        assert!((y[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resize_handles_batch_and_channels() {
        let x = Tensor::arange(0f64, 2. * 3. * 4. * 4., &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 4, 4))
            .unwrap();
        let y = resize_bilinear(&x, 8, 6, false).unwrap();
        assert_eq!(y.dims(), &[2, 3, 8, 6]);
        let z = resize_bilinear(&x, 4, 4, false).unwrap();
        assert_eq!(z.id(), x.id());
    }

    #[test]
    fn padded_max_pool_matches_direct_loop() {
        let vals: Vec<f64> = (0..2 * 6 * 6).map(|i| ((i * 37) % 23) as f64).collect();
        let x = Tensor::from_vec(vals.clone(), (1, 2, 6, 6), &Device::Cpu).unwrap();
        let y = max_pool_3x3_s2_p1(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 3, 3]);
        let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = 0.0f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            let ix = (2 * ox + kx) as isize - 1;
                            if (0..6).contains(&iy) && (0..6).contains(&ix) {
                                m = m.max(vals[c * 36 + iy as usize * 6 + ix as usize]);
                            }
                        }
                    }
                    assert_eq!(y[c * 9 + oy * 3 + ox], m);
                }
            }
        }
    }
}
