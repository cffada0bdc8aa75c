//! 3x3, stride-1, zero-padded ("same") dilated convolution and its adjoints.
//!
//! Layouts: input `Cin x H x W`, weights `Cout x Cin x 3 x 3`, bias `Cout`.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

pub const KERNEL: usize = 3;

/// Valid output range `[lo, hi)` along an axis of length `n` for tap offset `off`.
#[inline]
fn valid(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

#[inline]
fn tap_offset(k: usize, dilation: usize) -> isize {
    (k as isize - 1) * dilation as isize
}

fn check(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (cin, h, wd) = match *x {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("conv input must be rank 3, got {x:?}"))),
    };
    match *w {
        [co, ci, KERNEL, KERNEL] if ci == cin => Ok((co, cin, h, wd)),
        _ => Err(Error::shape(format!("conv weight {w:?} does not fit input {x:?}"))),
    }
}

/// `acc[x0..x1] += s * src[x0+dx..x1+dx]` for one row.
#[inline]
fn axpy<T: Real>(acc: &mut [T], src: &[T], s: T) {
    for (a, &b) in acc.iter_mut().zip(src) {
        *a += s * b;
    }
}

pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
    let (cout, cin, h, wd) = check(x.shape(), w.shape())?;
    if b.numel() != cout {
        return Err(Error::shape(format!("bias has {} entries, need {cout}", b.numel())));
    }
    let hw = h * wd;
    let mut out = vec![T::zero(); cout * hw];
    let wt = w.data();
    par::for_each_chunk(&mut out, hw, |co, dst| {
        dst.iter_mut().for_each(|v| *v = b.data()[co]);
        for ci in 0..cin {
            let src = x.plane(ci);
            for ky in 0..KERNEL {
                let dy = tap_offset(ky, dilation);
                let (y0, y1) = valid(h, dy);
                for kx in 0..KERNEL {
                    let dx = tap_offset(kx, dilation);
                    let (x0, x1) = valid(wd, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let s = wt[((co * cin + ci) * KERNEL + ky) * KERNEL + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        axpy(&mut dst[y * wd + x0..y * wd + x1], &src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)], s);
                    }
                }
            }
        }
    });
    Tensor::new(vec![cout, h, wd], out)
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input<T: Real>(grad_out: &Tensor<T>, w: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
    let (cout, h, wd) = grad_out.dims3()?;
    let cin = match *w.shape() {
        [co, ci, KERNEL, KERNEL] if co == cout => ci,
        _ => return Err(Error::shape(format!("conv weight {:?} does not fit gradient", w.shape()))),
    };
    let hw = h * wd;
    let mut out = vec![T::zero(); cin * hw];
    let wt = w.data();
    par::for_each_chunk(&mut out, hw, |ci, dst| {
        for co in 0..cout {
            let g = grad_out.plane(co);
            for ky in 0..KERNEL {
                let dy = tap_offset(ky, dilation);
                let (y0, y1) = valid(h, dy);
                for kx in 0..KERNEL {
                    let dx = tap_offset(kx, dilation);
                    let (x0, x1) = valid(wd, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let s = wt[((co * cin + ci) * KERNEL + ky) * KERNEL + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        axpy(&mut dst[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)], &g[y * wd + x0..y * wd + x1], s);
                    }
                }
            }
        }
    });
    Tensor::new(vec![cin, h, wd], out)
}

/// Gradients with respect to weights and bias.
pub fn conv2d_backward_params<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    dilation: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (cout, h, wd) = grad_out.dims3()?;
    let (cin, xh, xw) = x.dims3()?;
    if (xh, xw) != (h, wd) {
        return Err(Error::shape("conv gradient and input planes differ"));
    }
    let per_out = cin * KERNEL * KERNEL;
    let mut gw = vec![T::zero(); cout * per_out];
    par::for_each_chunk(&mut gw, per_out, |co, dst| {
        let g = grad_out.plane(co);
        for ci in 0..cin {
            let src = x.plane(ci);
            for ky in 0..KERNEL {
                let dy = tap_offset(ky, dilation);
                let (y0, y1) = valid(h, dy);
                for kx in 0..KERNEL {
                    let dx = tap_offset(kx, dilation);
                    let (x0, x1) = valid(wd, dx);
                    let mut acc = 0.0f64;
                    if x0 < x1 {
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let row: T = g[y * wd + x0..y * wd + x1]
                                .iter()
                                .zip(&src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)])
                                .map(|(&a, &b)| a * b)
                                .sum();
                            acc += row.f64();
                        }
                    }
                    dst[(ci * KERNEL + ky) * KERNEL + kx] = T::of(acc);
                }
            }
        }
    });
    let gb = (0..cout).map(|co| T::of(grad_out.plane(co).iter().map(|v| v.f64()).sum())).collect();
    Ok((Tensor::new(vec![cout, cin, KERNEL, KERNEL], gw)?, Tensor::new(vec![cout], gb)?))
}
