//! Synthetic activation traces with a controlled over-activation blob.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calibration::{CalibrationProfile, ChannelStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::ActivationTrace;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthLayer {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SynthLayer {
    pub fn new(name: &str, channels: usize, height: usize, width: usize) -> Self {
        SynthLayer { name: name.to_string(), channels, height, width }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub layers: Vec<SynthLayer>,
    /// Noise level in units of each channel's calibration std.
    pub background_std: f64,
    /// Blob rectangle as fractions of the plane: (top, left, bottom, right).
    pub blob_region: (f64, f64, f64, f64),
    /// Blob amplitude in units of each channel's calibration std.
    pub blob_gain: f64,
    /// Layers receiving the blob; `None` means every layer.
    pub blob_layers: Option<Vec<String>>,
    pub seed: u64,
}

impl SynthSpec {
    /// Pixel rectangle `[r0, r1) × [c0, c1)` of the blob on an `h × w` plane.
    pub fn blob_pixels(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let (t, l, b, r) = self.blob_region;
        let px = |f: f64, n: usize| ((f * n as f64).round() as usize).min(n);
        (px(t, h), px(b, h), px(l, w), px(r, w))
    }
}

/// Calibration statistics the synthetic traces are drawn from:
/// channel `c` has mean `0.5 + 0.1·c` and std `0.5 + 0.05·c`.
pub fn synth_profile(layers: &[SynthLayer]) -> CalibrationProfile {
    let mut p = CalibrationProfile::new("synthetic", "synthetic");
    for l in layers {
        let mean = (0..l.channels).map(|c| 0.5 + 0.1 * c as f64).collect();
        let std = (0..l.channels).map(|c| 0.5 + 0.05 * c as f64).collect();
        p.layers.insert(l.name.clone(), ChannelStats::from_moments(mean, std, 1 << 20).expect("valid moments"));
    }
    p
}

/// Gaussian activations at the profile's statistics plus an additive
/// `blob_gain · σ` rectangle.
pub fn synth_trace(spec: &SynthSpec, profile: &CalibrationProfile) -> Result<ActivationTrace> {
    let (t, l, b, r) = spec.blob_region;
    if !(0.0 <= t && t < b && b <= 1.0 && 0.0 <= l && l < r && r <= 1.0) {
        return Err(Error::invalid(format!("blob region {:?} is not inside the unit square", spec.blob_region)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trace = ActivationTrace::new();
    for layer in &spec.layers {
        profile.check_layer(&layer.name, layer.channels)?;
        let stats = profile.layer(&layer.name)?;
        let (mean, std) = (stats.mean(), stats.std());
        let blob_here = spec.blob_layers.as_ref().is_none_or(|names| names.contains(&layer.name));
        let (r0, r1, c0, c1) = spec.blob_pixels(layer.height, layer.width);
        let hw = layer.height * layer.width;
        let t = Tensor::from_fn(&[layer.channels, layer.height, layer.width], |i| {
            let (c, p) = (i / hw, i % hw);
            let (y, x) = (p / layer.width, p % layer.width);
            let n: f64 = StandardNormal.sample(&mut rng);
            let mut v = mean[c] + spec.background_std * std[c] * n;
            if blob_here && (r0..r1).contains(&y) && (c0..c1).contains(&x) {
                v += spec.blob_gain * std[c];
            }
            v as f32
        });
        trace.insert(layer.name.clone(), t);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::zscore;

    fn layers() -> Vec<SynthLayer> {
        vec![SynthLayer::new("a", 4, 24, 48), SynthLayer::new("b", 6, 12, 24)]
    }

    #[test]
    fn zero_gain_has_zero_mean_z() {
        let ls = layers();
        let profile = synth_profile(&ls);
        let spec = SynthSpec {
            layers: ls,
            background_std: 1.0,
            blob_region: (0.2, 0.2, 0.5, 0.5),
            blob_gain: 0.0,
            blob_layers: None,
            seed: 1,
        };
        let trace = synth_trace(&spec, &profile).unwrap();
        for (name, act) in trace.iter() {
            let z = zscore(act, profile.layer(name).unwrap(), 1e-6).unwrap();
            assert!(z.mean().abs() < 0.05, "{name}: {}", z.mean());
        }
    }

    #[test]
    fn blob_raises_values() {
        let ls = layers();
        let profile = synth_profile(&ls);
        let spec = SynthSpec {
            layers: ls,
            background_std: 0.0,
            blob_region: (0.25, 0.25, 0.5, 0.75),
            blob_gain: 2.0,
            blob_layers: Some(vec!["b".into()]),
            seed: 0,
        };
        let trace = synth_trace(&spec, &profile).unwrap();
        let a = zscore(trace.get("a").unwrap(), profile.layer("a").unwrap(), 1e-6).unwrap();
        assert!(a.data().iter().all(|v| v.abs() < 1e-5));
        let b = zscore(trace.get("b").unwrap(), profile.layer("b").unwrap(), 1e-6).unwrap();
        assert!((b.sum() - 2.0 * 6.0 * 3.0 * 12.0).abs() < 1e-3);
        assert!(synth_trace(&SynthSpec { blob_region: (0.5, 0.0, 0.4, 1.0), ..spec }, &profile).is_err());
    }
}
