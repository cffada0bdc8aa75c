//! Bilinear and nearest-neighbour resizing with half-pixel centers.

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Interpolation taps along one axis: output index `d` reads
/// `(1 - frac) * src[lo] + frac * src[hi]`.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let ratio = src as f64 / dst as f64;
        let max = (src - 1) as f64;
        let mut taps =
            AxisTaps { lo: Vec::with_capacity(dst), hi: Vec::with_capacity(dst), frac: Vec::with_capacity(dst) };
        for d in 0..dst {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            taps.lo.push(lo);
            taps.hi.push((lo + 1).min(src - 1));
            taps.frac.push(s - lo as f64);
        }
        taps
    }
}

fn check_resize(shape: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("resize needs a rank-3 tensor, got {shape:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot resize a zero-sized plane"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    Ok((c, h, w))
}

/// Per-channel bilinear resize to `out_h x out_w`.
pub fn resize_bilinear<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = check_resize(t.shape(), out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = vec![T::zero(); c * out_h * out_w];
    par::for_each_chunk(&mut out, out_h * out_w, |ch, dst| {
        let src = t.plane(ch);
        for y in 0..out_h {
            let fy = T::of(ty.frac[y]);
            let r0 = &src[ty.lo[y] * w..(ty.lo[y] + 1) * w];
            let r1 = &src[ty.hi[y] * w..(ty.hi[y] + 1) * w];
            let row = &mut dst[y * out_w..(y + 1) * out_w];
            for (x, o) in row.iter_mut().enumerate() {
                let fx = T::of(tx.frac[x]);
                let (a, b) = (tx.lo[x], tx.hi[x]);
                let top = r0[a] + (r0[b] - r0[a]) * fx;
                let bot = r1[a] + (r1[b] - r1[a]) * fx;
                *o = top + (bot - top) * fy;
            }
        }
    });
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Transpose of [`resize_bilinear`]: scatters an output-space gradient back
/// onto the `in_h x in_w` source grid.
pub fn resize_bilinear_adjoint<T: Real>(grad: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (c, out_h, out_w) = grad.dims3()?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(grad.clone());
    }
    let ty = AxisTaps::new(in_h, out_h);
    let tx = AxisTaps::new(in_w, out_w);
    let mut out = vec![T::zero(); c * in_h * in_w];
    par::for_each_chunk(&mut out, in_h * in_w, |ch, dst| {
        let g = grad.plane(ch);
        for y in 0..out_h {
            let fy = T::of(ty.frac[y]);
            let (r0, r1) = (ty.lo[y] * in_w, ty.hi[y] * in_w);
            for x in 0..out_w {
                let fx = T::of(tx.frac[x]);
                let v = g[y * out_w + x];
                let (a, b) = (tx.lo[x], tx.hi[x]);
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[r0 + a] += top * (T::one() - fx);
                dst[r0 + b] += top * fx;
                dst[r1 + a] += bot * (T::one() - fx);
                dst[r1 + b] += bot * fx;
            }
        }
    });
    Tensor::new(vec![c, in_h, in_w], out)
}

/// Nearest-neighbour resize (source index `floor((d + 0.5) * in / out)`),
/// used where values must stay binary.
pub fn resize_nearest<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = check_resize(t.shape(), out_h, out_w)?;
    let ys: Vec<usize> = (0..out_h).map(|d| nearest_index(d, h, out_h)).collect();
    let xs: Vec<usize> = (0..out_w).map(|d| nearest_index(d, w, out_w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = t.plane(ch);
        for &y in &ys {
            out.extend(xs.iter().map(|&x| src[y * w + x]));
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn nearest_index(d: usize, src: usize, dst: usize) -> usize {
    (((d as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        assert_eq!(resize_bilinear(&t, 3, 4).unwrap(), t);
    }

    #[test]
    fn half_pixel_upsample_of_two_samples() {
        let t = Tensor::<f64>::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&t, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constants_stay_constant() {
        let t = Tensor::<f32>::full(&[2, 5, 7], 0.3);
        for (h, w) in [(1, 1), (3, 11), (10, 2)] {
            let r = resize_bilinear(&t, h, w).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn adjoint_matches_inner_product() {
        // <R x, g> == <x, R^T g>
        let x = Tensor::<f64>::from_fn(&[2, 5, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let g = Tensor::<f64>::from_fn(&[2, 3, 9], |i| ((i * 13) % 7) as f64 * 0.5);
        let rx = resize_bilinear(&x, 3, 9).unwrap();
        let rtg = resize_bilinear_adjoint(&g, 5, 6).unwrap();
        let lhs: f64 = rx.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(rtg.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let t = Tensor::<f32>::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_nearest(&t, 4, 4).unwrap();
        assert_eq!(&r.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn zero_plane_is_an_error() {
        assert!(resize_bilinear(&Tensor::<f32>::zeros(&[1, 0, 3]), 2, 2).is_err());
    }
}
