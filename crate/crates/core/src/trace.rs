//! Activation traces and the on-disk interchange: one NPY per (image, layer)
//! plus a `manifest.json` describing layers, shapes and preprocessing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{npy_read, npy_write, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Post-activation outputs of named layers for one input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    layers: BTreeMap<String, Tensor>,
}

impl ActivationTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, activation: Tensor) {
        self.layers.insert(name.into(), activation);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.layers.get(name).ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl FromIterator<(String, Tensor)> for ActivationTrace {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ActivationTrace { layers: iter.into_iter().collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    /// Per-image activation shape (C, H, W).
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub source: String,
    /// Layer name → trace file, relative to the manifest directory.
    pub traces: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub version: u32,
    pub model_id: String,
    pub layers: Vec<LayerEntry>,
    /// Free-form description of input preprocessing, recorded verbatim.
    #[serde(default)]
    pub preprocessing: serde_json::Value,
    pub images: Vec<ImageEntry>,
}

impl TraceManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: TraceManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Checks that every listed trace file exists with the declared shape.
    pub fn validate(&self, dir: impl AsRef<Path>) -> Result<()> {
        for image in &self.images {
            self.load_image(dir.as_ref(), image)?;
        }
        Ok(())
    }

    fn load_image(&self, dir: &Path, image: &ImageEntry) -> Result<ActivationTrace> {
        let mut trace = ActivationTrace::new();
        for layer in &self.layers {
            let rel = image
                .traces
                .get(&layer.name)
                .ok_or_else(|| Error::Format(format!("image {} has no trace for layer {}", image.id, layer.name)))?;
            let t = npy_read(dir.join(rel))?;
            if t.shape() != layer.shape.as_slice() {
                return Err(Error::shape(format!(
                    "{}/{}: file shape {:?} does not match manifest {:?}",
                    image.id,
                    layer.name,
                    t.shape(),
                    layer.shape
                )));
            }
            trace.insert(layer.name.clone(), t);
        }
        Ok(trace)
    }

    /// Loads the trace of image `index`, validating shapes against the manifest.
    pub fn load_trace(&self, dir: impl AsRef<Path>, index: usize) -> Result<ActivationTrace> {
        let image =
            self.images.get(index).ok_or_else(|| Error::invalid(format!("image index {index} out of range")))?;
        self.load_image(dir.as_ref(), image)
    }
}

/// Writes traces and a manifest into `dir`. All traces must share the same
/// layer names and shapes.
pub fn write_trace_set<'a>(
    dir: impl AsRef<Path>,
    model_id: &str,
    preprocessing: serde_json::Value,
    items: impl IntoIterator<Item = (&'a str, &'a str, &'a ActivationTrace)>,
) -> Result<TraceManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers: Option<Vec<LayerEntry>> = None;
    let mut images = Vec::new();
    for (id, source, trace) in items {
        let entries: Vec<LayerEntry> =
            trace.iter().map(|(n, t)| LayerEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect();
        match &layers {
            None => layers = Some(entries),
            Some(first) if *first != entries => {
                return Err(Error::shape(format!("trace {id} differs in layers or shapes from the first trace")))
            }
            Some(_) => {}
        }
        let mut traces = BTreeMap::new();
        for (name, t) in trace.iter() {
            let rel: PathBuf = [id, &format!("{name}.npy")].iter().collect();
            let full = dir.join(&rel);
            if let Some(parent) = full.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            npy_write(t, &full)?;
            traces.insert(name.to_string(), rel.to_string_lossy().replace('\\', "/"));
        }
        images.push(ImageEntry { id: id.to_string(), source: source.to_string(), traces });
    }
    let manifest = TraceManifest {
        version: MANIFEST_VERSION,
        model_id: model_id.to_string(),
        layers: layers.unwrap_or_default(),
        preprocessing,
        images,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
