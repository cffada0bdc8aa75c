//! Fusion and detection: soft-thresholding the heatmaps into a soft mask,
//! the over-activation score `d`, the λ0 gate and the binary defense mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::learn::graph::{sigmoid, Graph, Var};
use crate::tensor::{resize_nearest, Image, Real, Tensor};

/// Below this soft-mask mass the score is defined as zero.
pub const SCORE_MASS_FLOOR: f64 = 1e-12;

/// `sigmoid(w2 · tanh(w1 · x + b1) + b2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftThresholdParams {
    pub w1: f64,
    pub b1: f64,
    pub w2: f64,
    pub b2: f64,
}

impl Default for SoftThresholdParams {
    /// Near-linear start so gradients flow through both activations.
    fn default() -> Self {
        SoftThresholdParams { w1: 1.0, b1: 0.0, w2: 1.0, b2: 0.0 }
    }
}

impl SoftThresholdParams {
    pub fn new(w1: f64, b1: f64, w2: f64, b2: f64) -> Self {
        SoftThresholdParams { w1, b1, w2, b2 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        sigmoid(self.w2 * (self.w1 * x + self.b1).tanh() + self.b2)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        SoftThresholdParams::new(a[0], a[1], a[2], a[3])
    }

    fn check(&self, which: &str) -> Result<()> {
        if self.to_array().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!("{which} has non-finite parameters")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// Applied to the deep heatmap to propose a region of interest.
    pub block_roi: SoftThresholdParams,
    /// Applied to `roi ⊙ H^S` to produce the soft mask.
    pub block_mask: SoftThresholdParams,
    pub lambda0: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { block_roi: Default::default(), block_mask: Default::default(), lambda0: 0.0 }
    }
}

impl FusionParams {
    /// The eight trainable scalars, ROI block first.
    pub fn to_array(&self) -> [f64; 8] {
        let (a, b) = (self.block_roi.to_array(), self.block_mask.to_array());
        [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
    }

    pub fn from_array(a: [f64; 8], lambda0: f64) -> Self {
        FusionParams {
            block_roi: SoftThresholdParams::from_array([a[0], a[1], a[2], a[3]]),
            block_mask: SoftThresholdParams::from_array([a[4], a[5], a[6], a[7]]),
            lambda0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_roi.check("block_roi")?;
        self.block_mask.check("block_mask")?;
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return Err(Error::invalid(format!("lambda0 must be finite and non-negative, got {}", self.lambda0)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: FusionParams = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        p.validate()?;
        Ok(p)
    }
}

/// Soft mask with values in `[0, 1]`, high where a patch is suspected.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(Tensor);

impl SoftMask {
    pub fn new(plane: Tensor) -> Result<Self> {
        let (c, _, _) = plane.dims3()?;
        if c != 1 || plane.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("soft mask must be a single channel in [0, 1]"));
        }
        Ok(SoftMask(plane))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `1 × H × W` plane of {0, 1}; 1 keeps a pixel, 0 masks it.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask(Tensor);

impl BinaryMask {
    pub fn new(plane: Tensor) -> Result<Self> {
        let (c, _, _) = plane.dims3()?;
        if c != 1 || plane.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("binary mask must be a single channel of 0/1"));
        }
        Ok(BinaryMask(plane))
    }

    pub fn all_ones(h: usize, w: usize) -> Self {
        BinaryMask(Tensor::ones(&[1, h, w]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn is_all_ones(&self) -> bool {
        self.0.data().iter().all(|&v| v == 1.0)
    }

    /// Indicator of masked pixels, `1 − M`.
    pub fn removed(&self) -> Tensor {
        self.0.map(|v| 1.0 - v)
    }

    pub fn as_image(&self) -> Image {
        Image::new(self.0.clone()).expect("binary values are in range")
    }
}

pub fn soft_threshold<T: Real>(x: &Tensor<T>, p: &SoftThresholdParams) -> Tensor<T> {
    x.map(|v| T::of(p.eval(v.f64())))
}

pub fn fusion_forward(hs: &Heatmap, hd: &Heatmap, p: &FusionParams) -> Result<SoftMask> {
    let roi = soft_threshold(hd.tensor(), &p.block_roi);
    let gated = roi.zip_map(hs.tensor(), |r, s| r * s)?;
    Ok(SoftMask(soft_threshold(&gated, &p.block_mask)))
}

/// `‖H^S ⊙ H^D ⊙ M̃‖₁ / ‖M̃‖₁`, zero when the soft mask carries no mass.
pub fn overactivation_score(hs: &Heatmap, hd: &Heatmap, m: &SoftMask) -> Result<f64> {
    hs.tensor().expect_same_shape(hd.tensor())?;
    hs.tensor().expect_same_shape(m.tensor())?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((&s, &d), &w) in hs.tensor().data().iter().zip(hd.tensor().data()).zip(m.tensor().data()) {
        num += (s as f64 * d as f64 * w as f64).abs();
        den += (w as f64).abs();
    }
    Ok(if den < SCORE_MASS_FLOOR { 0.0 } else { num / den })
}

/// Binary defense mask and detection flag. When `d > λ0`, pixels with
/// `M̃ ≥ 0.5` are masked; otherwise everything is kept.
pub fn make_mask(m: &SoftMask, d: f64, lambda0: f64, out_h: usize, out_w: usize) -> Result<(BinaryMask, bool)> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("mask dims must be positive"));
    }
    let flagged = d > lambda0;
    if !flagged {
        return Ok((BinaryMask::all_ones(out_h, out_w), false));
    }
    let keep = m.0.map(|v| if v >= 0.5 { 0.0 } else { 1.0 });
    Ok((BinaryMask(resize_nearest(&keep, out_h, out_w)?), true))
}

/// Zeros masked pixels in every channel.
pub fn apply_mask(x: &Image, m: &BinaryMask) -> Result<Image> {
    if (x.height(), x.width()) != m.dims() {
        return Err(Error::shape(format!("mask {:?} does not match image {}x{}", m.dims(), x.height(), x.width())));
    }
    if m.is_all_ones() {
        return Ok(x.clone());
    }
    let plane = m.0.data();
    let n = plane.len();
    let data: Vec<f32> = x.tensor().data().iter().enumerate().map(|(i, &v)| v * plane[i % n]).collect();
    Image::new(Tensor::new(x.tensor().shape().to_vec(), data)?)
}

// ---- graph builders -------------------------------------------------------

/// Graph handles of one soft-threshold block's four scalars.
#[derive(Clone, Copy, Debug)]
pub struct SoftThresholdVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub block_roi: SoftThresholdVars,
    pub block_mask: SoftThresholdVars,
}

impl FusionVars {
    /// Places the eight scalars on the graph, as leaves when `trainable`.
    pub fn place<T: Real>(g: &mut Graph<T>, p: &FusionParams, trainable: bool) -> Self {
        let mut put = |v: f64| {
            let t = Tensor::scalar(T::of(v));
            if trainable {
                g.leaf(t)
            } else {
                g.constant(t)
            }
        };
        let mut block =
            |s: &SoftThresholdParams| SoftThresholdVars { w1: put(s.w1), b1: put(s.b1), w2: put(s.w2), b2: put(s.b2) };
        let block_roi = block(&p.block_roi);
        let block_mask = block(&p.block_mask);
        FusionVars { block_roi, block_mask }
    }

    pub fn vars(&self) -> [Var; 8] {
        let (a, b) = (self.block_roi, self.block_mask);
        [a.w1, a.b1, a.w2, a.b2, b.w1, b.b1, b.w2, b.b2]
    }
}

pub fn soft_threshold_var<T: Real>(g: &mut Graph<T>, x: Var, p: &SoftThresholdVars) -> Result<Var> {
    let a = g.mul(x, p.w1)?;
    let a = g.add(a, p.b1)?;
    let a = g.tanh(a);
    let a = g.mul(a, p.w2)?;
    let a = g.add(a, p.b2)?;
    Ok(g.sigmoid(a))
}

pub fn fusion_var<T: Real>(g: &mut Graph<T>, hs: Var, hd: Var, p: &FusionVars) -> Result<Var> {
    let roi = soft_threshold_var(g, hd, &p.block_roi)?;
    let gated = g.mul(roi, hs)?;
    soft_threshold_var(g, gated, &p.block_mask)
}

/// Differentiable score. The soft mask is strictly positive, so the mass
/// floor only guards the division.
pub fn score_var<T: Real>(g: &mut Graph<T>, hs: Var, hd: Var, m: Var) -> Result<Var> {
    let prod = g.mul(hs, hd)?;
    let prod = g.mul(prod, m)?;
    let num = g.sum(prod);
    let den = g.sum(m);
    let den = g.clamp_min(den, T::of(SCORE_MASS_FLOOR));
    g.div(num, den)
}
