//! Stride-1 "same" average pooling over summed-area tables.
//!
//! The window for output `(y, x)` with kernel `k` spans rows
//! `y - k/2 ..= y - k/2 + k - 1` (integer division, so even kernels lean
//! toward the upper-left), clipped to the plane. Each output is divided by
//! the clipped window's true area, so constant planes map to themselves.

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Per-channel integral image: `at(c, i, j)` is the sum of all source
/// elements of channel `c` with row `< i` and column `< j`, accumulated in f64.
#[derive(Clone, Debug)]
pub struct SummedAreaTable {
    channels: usize,
    height: usize,
    width: usize,
    table: Vec<f64>,
}

impl SummedAreaTable {
    pub fn new<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let mut table = Vec::with_capacity(c * (h + 1) * (w + 1));
        for ch in 0..c {
            table.extend(plane_table(t.plane(ch), h, w));
        }
        Ok(SummedAreaTable { channels: c, height: h, width: w, table })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        let stride = (self.height + 1) * (self.width + 1);
        self.table[c * stride + i * (self.width + 1) + j]
    }

    /// Sum over rows `r0..r1` and columns `c0..c1` (half-open) of channel `c`.
    pub fn rect_sum(&self, c: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        self.at(c, r1, c1) - self.at(c, r0, c1) - self.at(c, r1, c0) + self.at(c, r0, c0)
    }
}

fn plane_table<T: Real>(src: &[T], h: usize, w: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut table = vec![0.0f64; (h + 1) * stride];
    for y in 0..h {
        let mut run = 0.0;
        for x in 0..w {
            run += src[y * w + x].f64();
            table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + run;
        }
    }
    table
}

/// Window extents around an output index: `before` elements above/left and
/// `after` below/right.
#[derive(Clone, Copy)]
struct Reach {
    before: usize,
    after: usize,
}

impl Reach {
    fn forward(k: usize) -> Self {
        Reach { before: k / 2, after: k - 1 - k / 2 }
    }

    fn span(self, i: usize, n: usize) -> (usize, usize) {
        (i.saturating_sub(self.before), (i + self.after + 1).min(n))
    }
}

/// `out[y][x] = scale(y, x) * sum(src over the clipped window)`.
fn window_sum_plane<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    ry: Reach,
    rx: Reach,
    scale: impl Fn(usize, usize) -> f64,
) -> Vec<T> {
    let table = plane_table(src, h, w);
    let stride = w + 1;
    let xs: Vec<(usize, usize)> = (0..w).map(|x| rx.span(x, w)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = ry.span(y, h);
        let (top, bot) = (&table[y0 * stride..(y0 + 1) * stride], &table[y1 * stride..(y1 + 1) * stride]);
        for (x, &(x0, x1)) in xs.iter().enumerate() {
            let s = bot[x1] - top[x1] - bot[x0] + top[x0];
            out.push(T::of(s * scale(y, x)));
        }
    }
    out
}

fn check_kernel(shape: &[usize], kh: usize, kw: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("pooling needs a rank-3 tensor, got {shape:?}"))),
    };
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::invalid(format!("kernel ({kh}, {kw}) does not fit a {h}x{w} plane")));
    }
    Ok((c, h, w))
}

fn clipped_area(y: usize, x: usize, h: usize, w: usize, ry: Reach, rx: Reach) -> f64 {
    let (y0, y1) = ry.span(y, h);
    let (x0, x1) = rx.span(x, w);
    ((y1 - y0) * (x1 - x0)) as f64
}

/// Stride-1 average pooling with clipped borders; `O(H*W)` per channel for
/// any kernel size.
pub fn avg_pool_same<T: Real>(t: &Tensor<T>, kh: usize, kw: usize) -> Result<Tensor<T>> {
    let (c, h, w) = check_kernel(t.shape(), kh, kw)?;
    if (kh, kw) == (1, 1) {
        return Ok(t.clone());
    }
    let (ry, rx) = (Reach::forward(kh), Reach::forward(kw));
    let planes = par::map_range(c, |ch| {
        window_sum_plane(t.plane(ch), h, w, ry, rx, |y, x| 1.0 / clipped_area(y, x, h, w, ry, rx))
    });
    Tensor::new(vec![c, h, w], planes.concat())
}

/// Transpose of [`avg_pool_same`] with the same kernel.
pub fn avg_pool_same_adjoint<T: Real>(grad: &Tensor<T>, kh: usize, kw: usize) -> Result<Tensor<T>> {
    let (c, h, w) = check_kernel(grad.shape(), kh, kw)?;
    if (kh, kw) == (1, 1) {
        return Ok(grad.clone());
    }
    let (ry, rx) = (Reach::forward(kh), Reach::forward(kw));
    // input q feeds output p iff p - before <= q <= p + after, i.e. q sees the
    // outputs in the mirrored window
    let mirror = |r: Reach| Reach { before: r.after, after: r.before };
    let planes = par::map_range(c, |ch| {
        let g = grad.plane(ch);
        let weighted: Vec<f64> = (0..h * w).map(|p| g[p].f64() / clipped_area(p / w, p % w, h, w, ry, rx)).collect();
        window_sum_plane(&weighted, h, w, mirror(ry), mirror(rx), |_, _| 1.0).into_iter().map(T::of).collect::<Vec<T>>()
    });
    Tensor::new(vec![c, h, w], planes.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sat_entries_are_prefix_sums() {
        let t = Tensor::<f32>::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let sat = SummedAreaTable::new(&t).unwrap();
        assert_eq!(sat.at(0, 0, 3), 0.0);
        assert_eq!(sat.at(0, 1, 3), 6.0);
        assert_eq!(sat.at(0, 2, 2), 12.0);
        assert_eq!(sat.at(0, 2, 3), 21.0);
        assert_eq!(sat.rect_sum(0, 0, 2, 1, 3), 2.0 + 3.0 + 5.0 + 6.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let t = Tensor::<f32>::from_fn(&[2, 4, 5], |i| i as f32 * 0.1);
        assert_eq!(avg_pool_same(&t, 1, 1).unwrap(), t);
    }

    #[test]
    fn row_of_three_with_clipping() {
        let t = Tensor::<f64>::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = avg_pool_same(&t, 1, 3).unwrap();
        assert_eq!(p.data(), &[1.5, 2.0, 2.5]);
    }

    #[test]
    fn even_kernel_leans_upper_left() {
        // k = 2: window for x covers [x - 1, x]
        let t = Tensor::<f64>::new(vec![1, 1, 3], vec![1.0, 3.0, 5.0]).unwrap();
        assert_eq!(avg_pool_same(&t, 1, 2).unwrap().data(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn constants_are_fixed_points() {
        let t = Tensor::<f32>::full(&[3, 9, 14], -2.5);
        let p = avg_pool_same(&t, 6, 13).unwrap();
        assert!(p.data().iter().all(|&v| (v + 2.5).abs() < 1e-6));
    }

    #[test]
    fn oversized_kernel_rejected() {
        let t = Tensor::<f32>::zeros(&[1, 4, 4]);
        assert!(avg_pool_same(&t, 5, 1).is_err());
        assert!(avg_pool_same(&t, 0, 1).is_err());
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let x = Tensor::<f64>::from_fn(&[2, 7, 9], |i| ((i * 31) % 17) as f64 - 8.0);
        let g = Tensor::<f64>::from_fn(&[2, 7, 9], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6);
        for (kh, kw) in [(3, 3), (2, 5), (7, 4)] {
            let px = avg_pool_same(&x, kh, kw).unwrap();
            let ptg = avg_pool_same_adjoint(&g, kh, kw).unwrap();
            let lhs: f64 = px.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ptg.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "kernel ({kh}, {kw})");
        }
    }
}
