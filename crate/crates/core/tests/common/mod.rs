#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zmask::tensor::{Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(r.random_range(lo..hi)))
}

/// Uniform values whose magnitude stays at least `gap` away from zero.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(gap..hi);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Naive stride-1 clipped-window average pooling.
pub fn pool_oracle(t: &Tensor<f64>, kh: usize, kw: usize) -> Tensor<f64> {
    let (c, h, w) = t.dims3().unwrap();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0usize);
                for dy in 0..kh {
                    for dx in 0..kw {
                        let yy = y as i64 - (kh / 2) as i64 + dy as i64;
                        let xx = x as i64 - (kw / 2) as i64 + dx as i64;
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            s += t.data()[ch * h * w + yy as usize * w + xx as usize];
                            n += 1;
                        }
                    }
                }
                out.data_mut()[ch * h * w + y * w + x] = s / n as f64;
            }
        }
    }
    out
}
