//! Clean-image activation statistics and Z-score standardization.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_STD_EPS: f64 = 1e-6;

/// Streaming per-channel mean / population variance (Chan et al. merge).
/// Accumulated in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: u64,
}

impl ChannelStats {
    pub fn empty(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], var: vec![0.0; channels], count: 0 }
    }

    /// Builds statistics from known per-channel means and standard deviations.
    pub fn from_moments(mean: Vec<f64>, std: Vec<f64>, count: u64) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::shape(format!("{} means but {} stds", mean.len(), std.len())));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|&s| s < 0.0) {
            return Err(Error::invalid("moments must be finite with non-negative std"));
        }
        Ok(ChannelStats { mean, var: std.iter().map(|s| s * s).collect(), count })
    }

    pub fn from_activation<T: Real>(activation: &Tensor<T>) -> Result<Self> {
        let (c, _, _) = activation.dims3()?;
        ChannelStats::empty(c).accumulate(activation)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population standard deviation per channel.
    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Folds every spatial position of `activation` into the running moments.
    pub fn accumulate<T: Real>(self, activation: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = activation.dims3()?;
        if c != self.channels() {
            return Err(Error::shape(format!("activation has {c} channels, statistics track {}", self.channels())));
        }
        let n = (h * w) as u64;
        if n == 0 {
            return Ok(self);
        }
        let mut batch = ChannelStats::empty(c);
        batch.count = n;
        for ch in 0..c {
            let plane = activation.plane(ch);
            let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            batch.mean[ch] = mean;
            batch.var[ch] = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
        }
        self.merge(&batch)
    }

    pub fn merge(mut self, other: &ChannelStats) -> Result<Self> {
        if other.channels() != self.channels() {
            return Err(Error::shape(format!(
                "cannot merge statistics over {} and {} channels",
                self.channels(),
                other.channels()
            )));
        }
        if other.count == 0 {
            return Ok(self);
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for ch in 0..self.channels() {
            let delta = other.mean[ch] - self.mean[ch];
            let m2 = self.var[ch] * na + other.var[ch] * nb + delta * delta * na * nb / n;
            self.mean[ch] += delta * nb / n;
            self.var[ch] = m2 / n;
        }
        self.count += other.count;
        Ok(self)
    }

    /// Per-channel `(scale, shift)` such that `z = h * scale + shift`.
    pub fn standardizer(&self, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let std = self.std();
        let scale: Vec<f64> = std.iter().map(|s| 1.0 / s.max(eps)).collect();
        let shift = self.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        (scale, shift)
    }
}

#[derive(Serialize, Deserialize)]
struct StatsRepr {
    mean: Vec<f64>,
    std: Vec<f64>,
    count: u64,
}

impl Serialize for ChannelStats {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StatsRepr { mean: self.mean.clone(), std: self.std(), count: self.count }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelStats {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = StatsRepr::deserialize(d)?;
        if r.mean.len() != r.std.len() {
            return Err(serde::de::Error::custom("mean and std lengths differ"));
        }
        if r.std.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(serde::de::Error::custom("std must be finite and non-negative"));
        }
        let var = r.std.iter().map(|s| s * s).collect();
        Ok(ChannelStats { mean: r.mean, var, count: r.count })
    }
}

/// `(h - mean) / max(std, eps)` per channel.
pub fn zscore<T: Real>(activation: &Tensor<T>, stats: &ChannelStats, eps: f64) -> Result<Tensor<T>> {
    let (c, h, w) = activation.dims3()?;
    if c != stats.channels() {
        return Err(Error::shape(format!("activation has {c} channels, statistics have {}", stats.channels())));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let (scale, shift) = stats.standardizer(eps);
    let hw = h * w;
    let data = activation
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / hw;
            T::of(v.f64() * scale[ch] + shift[ch])
        })
        .collect();
    Tensor::new(vec![c, h, w], data)
}

/// Per-layer statistics from a clean calibration set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub model_id: String,
    pub dataset_id: String,
    pub image_count: usize,
    pub layers: BTreeMap<String, ChannelStats>,
}

impl CalibrationProfile {
    pub fn new(model_id: impl Into<String>, dataset_id: impl Into<String>) -> Self {
        CalibrationProfile {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            image_count: 0,
            layers: BTreeMap::new(),
        }
    }

    /// Adds one image's activations (`layer name -> tensor`).
    pub fn observe<'a, T: Real>(
        &mut self,
        activations: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    ) -> Result<()> {
        for (name, act) in activations {
            let stats = match self.layers.remove(name) {
                Some(s) => s.accumulate(act)?,
                None => ChannelStats::from_activation(act)?,
            };
            self.layers.insert(name.to_string(), stats);
        }
        self.image_count += 1;
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Result<&ChannelStats> {
        self.layers.get(name).ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    /// Checks that every named layer exists with the expected channel count.
    pub fn check_layer(&self, name: &str, channels: usize) -> Result<()> {
        let got = self.layer(name)?.channels();
        if got != channels {
            return Err(Error::shape(format!("layer `{name}` has {channels} channels, profile has {got}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn constant_activation_has_zero_std() {
        let s = ChannelStats::from_activation(&Tensor::<f32>::full(&[2, 3, 3], 3.0)).unwrap();
        assert_eq!(s.mean(), &[3.0, 3.0]);
        assert_eq!(s.std(), vec![0.0, 0.0]);
        assert_eq!(s.count(), 9);
    }

    #[test]
    fn population_std_of_one_two_three() {
        let s = ChannelStats::from_activation(&plane(&[1.0, 2.0, 3.0])).unwrap();
        // two-pass oracle
        let mean = 2.0;
        let var = [1.0f64, 2.0, 3.0].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert_eq!(s.mean(), &[mean]);
        assert!((s.std()[0] - var.sqrt()).abs() < 1e-15);
        assert!((s.std()[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn merge_equals_single_pass() {
        let a = plane(&[0.5, 1.5, -2.0, 7.0]);
        let b = plane(&[3.0, 3.5]);
        let both = plane(&[0.5, 1.5, -2.0, 7.0, 3.0, 3.5]);
        let merged =
            ChannelStats::from_activation(&a).unwrap().merge(&ChannelStats::from_activation(&b).unwrap()).unwrap();
        let single = ChannelStats::from_activation(&both).unwrap();
        assert!((merged.mean()[0] - single.mean()[0]).abs() <= 1e-6 * single.mean()[0].abs());
        assert!((merged.std()[0] - single.std()[0]).abs() <= 1e-6 * single.std()[0]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let s = ChannelStats::empty(2);
        assert!(s.clone().accumulate(&Tensor::<f32>::zeros(&[3, 2, 2])).is_err());
        assert!(zscore(&Tensor::<f32>::zeros(&[3, 2, 2]), &s, 1e-6).is_err());
    }

    #[test]
    fn zscore_basic_cases() {
        let stats = ChannelStats::from_activation(&plane(&[1.0, 3.0])).unwrap();
        // mean 2, std 1
        let at_mean = zscore(&plane(&[2.0, 2.0]), &stats, 1e-6).unwrap();
        assert_eq!(at_mean.data(), &[0.0, 0.0]);
        let two_sigma = zscore(&plane(&[4.0]), &stats, 1e-6).unwrap();
        assert_eq!(two_sigma.data(), &[2.0]);
    }

    #[test]
    fn dead_channel_uses_eps_floor() {
        let stats = ChannelStats::from_activation(&plane(&[5.0, 5.0])).unwrap();
        let z = zscore(&plane(&[6.0]), &stats, 1e-6).unwrap();
        assert!((z.data()[0] - 1e6).abs() < 1e-6);
    }

    #[test]
    fn profile_json_round_trip_is_exact() {
        let mut p = CalibrationProfile::new("toy", "scenes");
        let a = Tensor::<f32>::from_fn(&[3, 4, 4], |i| ((i * 7919) % 101) as f32 * 0.013);
        p.observe([("L1", &a)]).unwrap();
        let back: CalibrationProfile = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(back.to_json(), p.to_json());
        assert_eq!(back.layer("L1").unwrap().mean(), p.layer("L1").unwrap().mean());
        assert!(matches!(p.layer("L9"), Err(Error::MissingLayer(_))));
    }
}
