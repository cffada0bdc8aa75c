//! Central finite-difference checks for analytic gradients.
//!
//! The oracle only evaluates the forward function, so it stays independent
//! of the backward pass it is checking.

use crate::tensor::Tensor;

/// Relative disagreement `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_gradient(f: &mut dyn FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Central difference of `f` along direction `dir`.
pub fn directional_derivative(
    f: &mut dyn FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    dir: &Tensor<f64>,
    h: f64,
) -> f64 {
    let step = |s: f64| {
        Tensor::new(x.shape().to_vec(), x.data().iter().zip(dir.data()).map(|(a, d)| a + s * d).collect())
            .expect("same shape")
    };
    (f(&step(h)) - f(&step(-h))) / (2.0 * h)
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest componentwise relative error between two gradients.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    analytic.data().iter().zip(numeric.data()).map(|(&a, &n)| rel_err(a, n, floor)).fold(0.0, f64::max)
}
