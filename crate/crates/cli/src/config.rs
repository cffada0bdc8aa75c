//! Run configuration: one JSON file shared by every subcommand. Relative
//! paths are resolved against the directory containing the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zmask::attacks::AttackConfig;
use zmask::heatmap::LayerSetConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Toy,
    Traces,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub source: Source,
    /// Toy weight directory; the shipped weights when absent.
    pub weights: Option<PathBuf>,
    /// Trace interchange directory when `source` is `traces`.
    pub traces: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRange {
    pub start: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub calibration: SceneRange,
    pub train: SceneRange,
    pub test: SceneRange,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            calibration: SceneRange { start: 0, count: 64 },
            train: SceneRange { start: 1000, count: 32 },
            test: SceneRange { start: 2000, count: 64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 15, lr: 0.01, batch_size: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsItem {
    /// NPY label map (`1×H×W` class ids).
    pub prediction: PathBuf,
    pub labels: PathBuf,
    /// NPY patch footprint; its pixels are excluded from mIoU.
    pub footprint: Option<PathBuf>,
    /// Defense mask (PGM or NPY, 1 = keep) for localization IoU against the footprint.
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionInputs {
    pub scores: Vec<f64>,
    pub positive: Vec<bool>,
    pub lambda0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub classes: usize,
    pub items: Vec<MetricsItem>,
    pub detection: Option<DetectionInputs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scenes: SceneConfig,
    /// Layer-set file; the toy defaults when absent.
    pub layers: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub fusion: Option<PathBuf>,
    /// Patch NPY files used to build the patched training set.
    pub patches: Vec<PathBuf>,
    pub attack: AttackConfig,
    pub sweep_beta: Vec<f64>,
    pub sweep_alpha: Vec<f64>,
    pub train: TrainSection,
    pub metrics: Option<MetricsConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            scenes: SceneConfig::default(),
            layers: None,
            profile: None,
            fusion: None,
            patches: Vec::new(),
            attack: AttackConfig::default(),
            sweep_beta: (1..=10).map(|i| i as f64 / 10.0).collect(),
            sweep_alpha: (0..=10).map(|i| i as f64 / 10.0).collect(),
            train: TrainSection::default(),
            metrics: None,
        }
    }
}

/// A parsed configuration plus the raw bytes it came from.
pub struct Loaded {
    pub config: RunConfig,
    pub bytes: Vec<u8>,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Loaded, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        config.attack.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Loaded { config, bytes })
    }

    fn rebase(&mut self, base: &Path) {
        let opts =
            [&mut self.model.weights, &mut self.model.traces, &mut self.layers, &mut self.profile, &mut self.fusion];
        for p in opts.into_iter().flatten() {
            rebase(base, p);
        }
        self.patches.iter_mut().for_each(|p| rebase(base, p));
        if let Some(m) = &mut self.metrics {
            for item in &mut m.items {
                rebase(base, &mut item.prediction);
                rebase(base, &mut item.labels);
                item.footprint.iter_mut().chain(item.mask.iter_mut()).for_each(|p| rebase(base, p));
            }
        }
    }

    pub fn layer_set(&self) -> Result<LayerSetConfig, CliError> {
        match &self.layers {
            Some(p) => LayerSetConfig::load(p).map_err(CliError::from_config),
            None => Ok(LayerSetConfig::toy()),
        }
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
        field.as_deref().ok_or_else(|| CliError::Config(format!("config field `{name}` is required")))
    }
}
