//! Layer-wise over-activation heatmaps: the pooling cascade over a Z-score
//! tensor, and pixel-wise max aggregation into shallow/deep maps.
//!
//! Every operation exists twice: on plain tensors (inference) and as a
//! graph builder (attacks that differentiate through the heatmaps). Tests
//! pin the two routes to each other.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{zscore, CalibrationProfile, ChannelStats, DEFAULT_STD_EPS};
use crate::error::{Error, Result};
use crate::learn::graph::{Graph, Var};
use crate::par;
use crate::tensor::{avg_pool_same, image_write, npy_write, resize_bilinear, Image, Real, Tensor};
use crate::trace::ActivationTrace;

pub const DEFAULT_EPS_NORM: f64 = 1e-6;

fn default_eps_norm() -> f64 {
    DEFAULT_EPS_NORM
}

fn default_std_eps() -> f64 {
    DEFAULT_STD_EPS
}

/// Kernels `k_1 ≥ … ≥ k_m` and the common resize resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolCascadeSpec {
    pub kernels: Vec<(usize, usize)>,
    pub resize_dims: (usize, usize),
    #[serde(default = "default_eps_norm")]
    pub eps_norm: f64,
}

impl PoolCascadeSpec {
    pub fn new(kernels: Vec<(usize, usize)>, resize_dims: (usize, usize)) -> Result<Self> {
        let spec = PoolCascadeSpec { kernels, resize_dims, eps_norm: DEFAULT_EPS_NORM };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resize_dims;
        if h == 0 || w == 0 {
            return Err(Error::invalid("resize_dims must be positive"));
        }
        if self.kernels.is_empty() {
            return Err(Error::invalid("cascade needs at least one kernel"));
        }
        if !(self.eps_norm > 0.0 && self.eps_norm.is_finite()) {
            return Err(Error::invalid(format!("eps_norm must be positive, got {}", self.eps_norm)));
        }
        for (i, &(kh, kw)) in self.kernels.iter().enumerate() {
            if kh == 0 || kw == 0 {
                return Err(Error::invalid(format!("kernel {i} has a zero side")));
            }
            if kh > h || kw > w {
                return Err(Error::invalid(format!("kernel {i} ({kh}, {kw}) exceeds resize dims ({h}, {w})")));
            }
            if i > 0 {
                let (ph, pw) = self.kernels[i - 1];
                if kh > ph || kw > pw {
                    return Err(Error::invalid(format!(
                        "kernels must be non-increasing: ({ph}, {pw}) then ({kh}, {kw})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Shallow-set cascade used for segmentation models at full scale.
    pub fn segmentation_shallow() -> Self {
        Self::preset(vec![(64, 128), (32, 64), (16, 32), (8, 16)], (150, 300))
    }

    pub fn segmentation_deep() -> Self {
        Self::preset(vec![(64, 128), (32, 64)], (150, 300))
    }

    pub fn detection_shallow() -> Self {
        Self::preset(vec![(40, 40), (25, 25), (10, 10)], (400, 500))
    }

    pub fn detection_deep() -> Self {
        Self::preset(vec![(80, 80), (40, 40)], (400, 500))
    }

    /// Segmentation presets scaled to the 48×96 toy heatmap resolution.
    pub fn toy_shallow() -> Self {
        Self::preset(vec![(8, 16), (4, 8), (2, 4), (1, 2)], (48, 96))
    }

    pub fn toy_deep() -> Self {
        Self::preset(vec![(8, 16), (4, 8)], (48, 96))
    }

    fn preset(kernels: Vec<(usize, usize)>, resize_dims: (usize, usize)) -> Self {
        PoolCascadeSpec { kernels, resize_dims, eps_norm: DEFAULT_EPS_NORM }
    }
}

/// Single-channel non-negative map at the cascade resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap(Tensor);

impl Heatmap {
    /// Wraps a `1×H×W` tensor, rejecting negative or non-finite values.
    pub fn new(plane: Tensor) -> Result<Self> {
        let (c, _, _) = plane.dims3()?;
        if c != 1 {
            return Err(Error::shape(format!("heatmap must have one channel, got {c}")));
        }
        if let Some(i) = plane.data().iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!(
                "heatmap value {} at {i} is not a finite non-negative",
                plane.data()[i]
            )));
        }
        Ok(Heatmap(plane))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn max(&self) -> f32 {
        self.0.max_value()
    }

    pub fn write_npy(&self, path: impl AsRef<Path>) -> Result<()> {
        npy_write(&self.0, path)
    }

    /// Grayscale export, linearly mapped so that 0 is black and the maximum is white.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        image_write(&self.tone_mapped(), path)
    }

    pub fn tone_mapped(&self) -> Image {
        let top = self.max();
        let scale = if top > 0.0 { 1.0 / top } else { 0.0 };
        Image::new(self.0.map(|v| (v * scale).clamp(0.0, 1.0))).expect("values in [0, 1]")
    }
}

/// Which layers form the shallow and deep sets, and their cascades.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSetConfig {
    pub shallow_layers: Vec<String>,
    pub deep_layers: Vec<String>,
    pub shallow_cascade: PoolCascadeSpec,
    pub deep_cascade: PoolCascadeSpec,
    #[serde(default = "default_std_eps")]
    pub std_eps: f64,
}

impl LayerSetConfig {
    /// Defaults for the toy segmentation network.
    pub fn toy() -> Self {
        LayerSetConfig {
            shallow_layers: vec!["L1".into(), "L2".into()],
            deep_layers: vec!["L3".into(), "L4".into()],
            shallow_cascade: PoolCascadeSpec::toy_shallow(),
            deep_cascade: PoolCascadeSpec::toy_deep(),
            std_eps: DEFAULT_STD_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shallow_layers.is_empty() || self.deep_layers.is_empty() {
            return Err(Error::invalid("shallow and deep layer lists must be non-empty"));
        }
        self.shallow_cascade.validate()?;
        self.deep_cascade.validate()?;
        if self.shallow_cascade.resize_dims != self.deep_cascade.resize_dims {
            return Err(Error::invalid("shallow and deep cascades must share resize_dims"));
        }
        Ok(())
    }

    pub fn resize_dims(&self) -> (usize, usize) {
        self.shallow_cascade.resize_dims
    }

    /// Every configured layer, each once, in first-mention order.
    pub fn all_layers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for name in self.shallow_layers.iter().chain(&self.deep_layers) {
            if !out.contains(&name.as_str()) {
                out.push(name);
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: LayerSetConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Runs the cascade on a rank-3 Z-score tensor and returns the multi-channel
/// final stage `a_m` (before the absolute value and channel mean).
pub fn cascade_stage<T: Real>(z: &Tensor<T>, spec: &PoolCascadeSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    z.dims3()?;
    let (h, w) = spec.resize_dims;
    let zr = resize_bilinear(z, h, w)?;
    let eps = T::of(spec.eps_norm);
    let mut prev: Option<Tensor<T>> = None;
    for &(kh, kw) in &spec.kernels {
        let stage = resize_bilinear(&avg_pool_same(&zr, kh, kw)?, h, w)?;
        let next = match prev {
            None => stage,
            Some(p) => {
                let norm = p.data().iter().fold(T::zero(), |m, v| m.max(v.abs())).max(eps);
                stage.zip_map(&p, |s, q| s * (q / norm))?
            }
        };
        prev = Some(next);
    }
    Ok(prev.expect("at least one kernel"))
}

fn channel_mean_abs<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = a.dims3()?;
    let mut out = vec![T::zero(); h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(a.plane(ch)) {
            *o += v.abs();
        }
    }
    let inv = T::of(1.0 / c as f64);
    out.iter_mut().for_each(|o| *o *= inv);
    Tensor::new(vec![1, h, w], out)
}

/// Heatmap of one layer: channel mean of `|a_m|`.
pub fn layer_heatmap(z: &Tensor, spec: &PoolCascadeSpec) -> Result<Heatmap> {
    Ok(Heatmap(channel_mean_abs(&cascade_stage(z, spec)?)?))
}

/// Pixel-wise maximum.
pub fn aggregate(maps: &[Heatmap]) -> Result<Heatmap> {
    let (first, rest) = maps.split_first().ok_or_else(|| Error::invalid("cannot aggregate zero heatmaps"))?;
    let mut out = first.0.clone();
    for m in rest {
        out = out.zip_map(&m.0, f32::max)?;
    }
    Ok(Heatmap(out))
}

/// Z-scores every configured layer and aggregates each set.
pub fn shallow_deep_heatmaps(
    trace: &ActivationTrace,
    profile: &CalibrationProfile,
    cfg: &LayerSetConfig,
) -> Result<(Heatmap, Heatmap)> {
    cfg.validate()?;
    let names = cfg.all_layers();
    let zs: Vec<Tensor> = names
        .iter()
        .map(|&n| {
            let act = trace.get(n)?;
            profile.check_layer(n, act.dims3()?.0)?;
            zscore(act, profile.layer(n)?, cfg.std_eps)
        })
        .collect::<Result<_>>()?;
    let z_of: BTreeMap<&str, &Tensor> = names.iter().copied().zip(&zs).collect();

    let mut jobs: Vec<(&Tensor, &PoolCascadeSpec)> = Vec::new();
    jobs.extend(cfg.shallow_layers.iter().map(|n| (z_of[n.as_str()], &cfg.shallow_cascade)));
    jobs.extend(cfg.deep_layers.iter().map(|n| (z_of[n.as_str()], &cfg.deep_cascade)));
    let maps = par::map(&jobs, |(z, spec)| layer_heatmap(z, spec)).into_iter().collect::<Result<Vec<_>>>()?;
    let (s, d) = maps.split_at(cfg.shallow_layers.len());
    Ok((aggregate(s)?, aggregate(d)?))
}

// ---- graph builders -------------------------------------------------------

/// `(h - μ) / max(σ, eps)` per channel on the graph.
pub fn zscore_var<T: Real>(g: &mut Graph<T>, h: Var, stats: &ChannelStats, eps: f64) -> Result<Var> {
    let (scale, shift) = stats.standardizer(eps);
    g.channel_affine(h, scale.into_iter().map(T::of).collect(), shift.into_iter().map(T::of).collect())
}

pub fn layer_heatmap_var<T: Real>(g: &mut Graph<T>, z: Var, spec: &PoolCascadeSpec) -> Result<Var> {
    spec.validate()?;
    let (h, w) = spec.resize_dims;
    let zr = g.resize(z, h, w)?;
    let mut prev: Option<Var> = None;
    for &(kh, kw) in &spec.kernels {
        let pooled = g.avg_pool(zr, kh, kw)?;
        let stage = g.resize(pooled, h, w)?;
        let next = match prev {
            None => stage,
            Some(p) => {
                let norm = g.inf_norm(p)?;
                let norm = g.clamp_min(norm, T::of(spec.eps_norm));
                let scaled = g.div(p, norm)?;
                g.mul(stage, scaled)?
            }
        };
        prev = Some(next);
    }
    let a = g.abs(prev.expect("at least one kernel"));
    g.channel_mean(a)
}

pub fn aggregate_var<T: Real>(g: &mut Graph<T>, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps.split_first().ok_or_else(|| Error::invalid("cannot aggregate zero heatmaps"))?;
    rest.iter().try_fold(first, |acc, &m| g.maximum(acc, m))
}

/// Graph version of [`shallow_deep_heatmaps`]; `acts` maps layer names to
/// raw activation nodes.
pub fn shallow_deep_vars<T: Real>(
    g: &mut Graph<T>,
    acts: &BTreeMap<String, Var>,
    profile: &CalibrationProfile,
    cfg: &LayerSetConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let mut z_of: BTreeMap<&str, Var> = BTreeMap::new();
    for name in cfg.all_layers() {
        let act = *acts.get(name).ok_or_else(|| Error::MissingLayer(name.to_string()))?;
        profile.check_layer(name, g.value(act).dims3()?.0)?;
        let z = zscore_var(g, act, profile.layer(name)?, cfg.std_eps)?;
        z_of.insert(name, z);
    }
    let set = |g: &mut Graph<T>, names: &[String], spec: &PoolCascadeSpec| -> Result<Var> {
        let maps = names.iter().map(|n| layer_heatmap_var(g, z_of[n.as_str()], spec)).collect::<Result<Vec<_>>>()?;
        aggregate_var(g, &maps)
    };
    let hs = set(g, &cfg.shallow_layers, &cfg.shallow_cascade)?;
    let hd = set(g, &cfg.deep_layers, &cfg.deep_cascade)?;
    Ok((hs, hd))
}
