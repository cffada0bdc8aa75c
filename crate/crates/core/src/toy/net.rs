//! The toy per-pixel classifier: five dilated 3×3 convolutions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::conv::{conv2d_forward, KERNEL};
use crate::learn::graph::{Graph, Var};
use crate::tensor::{npy_read, npy_write, Image, Real, Tensor};
use crate::trace::ActivationTrace;

pub const LAYER_NAMES: [&str; 5] = ["L1", "L2", "L3", "L4", "L5"];
pub const CHANNELS: [usize; 6] = [3, 8, 16, 16, 8, N_CLASSES];
/// Growing dilations widen the receptive field to 111 px without striding.
pub const DILATIONS: [usize; 5] = [1, 2, 4, 16, 32];
pub const N_CLASSES: usize = 4;
pub const INPUT_DIMS: (usize, usize) = (96, 192);
pub const MODEL_ID: &str = "toy-segnet-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
    /// The last layer emits raw logits.
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySegNet {
    layers: Vec<ConvLayer>,
}

#[derive(Serialize, Deserialize)]
struct WeightManifest {
    model_id: String,
    seed: u64,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    weight: String,
    bias: String,
    weight_shape: Vec<usize>,
    dilation: usize,
    relu: bool,
}

/// Graph nodes produced by [`ToySegNet::forward_var`].
pub struct NetVars {
    pub logits: Var,
    pub activations: BTreeMap<String, Var>,
    /// Weight and bias per layer, in layer order.
    pub params: Vec<Var>,
}

pub const WEIGHTS_MANIFEST: &str = "weights.json";

impl ToySegNet {
    /// He-normal weights and zero biases from `seed`.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..LAYER_NAMES.len())
            .map(|i| {
                let (cin, cout) = (CHANNELS[i], CHANNELS[i + 1]);
                let std = (2.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let shape = [cout, cin, KERNEL, KERNEL];
                let weight = Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32);
                ConvLayer {
                    name: LAYER_NAMES[i].to_string(),
                    weight,
                    bias: Tensor::zeros(&[cout]),
                    dilation: DILATIONS[i],
                    relu: i + 1 < LAYER_NAMES.len(),
                }
            })
            .collect();
        ToySegNet { layers }
    }

    /// Directory of the fitted weights shipped with the crate.
    pub fn golden_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("toy")
    }

    pub fn golden() -> Result<Self> {
        Self::load(Self::golden_dir())
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Copies of every weight and bias, in layer order.
    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::shape(format!("expected {} tensors, got {}", 2 * self.layers.len(), params.len())));
        }
        let mut it = params.into_iter();
        for l in &mut self.layers {
            let (w, b) = (it.next().expect("len checked"), it.next().expect("len checked"));
            l.weight.expect_same_shape(&w)?;
            l.bias.expect_same_shape(&b)?;
            l.weight = w;
            l.bias = b;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.dims3()?;
        if c != CHANNELS[0] || h == 0 || w == 0 {
            return Err(Error::shape(format!("toy net expects a {}-channel image, got {:?}", CHANNELS[0], x.shape())));
        }
        Ok(())
    }

    /// Logits plus every named post-activation output.
    pub fn forward_trace(&self, x: &Image) -> Result<(Tensor, ActivationTrace)> {
        self.check_input(x.tensor())?;
        let mut trace = ActivationTrace::new();
        let mut h = x.tensor().clone();
        for l in &self.layers {
            h = conv2d_forward(&h, &l.weight, &l.bias, l.dilation)?;
            if l.relu {
                h = h.map(|v| v.max(0.0));
            }
            trace.insert(l.name.clone(), h.clone());
        }
        Ok((h, trace))
    }

    /// Per-pixel arg-max class, row-major.
    pub fn predict(&self, x: &Image) -> Result<Vec<usize>> {
        Ok(argmax_classes(&self.forward_trace(x)?.0))
    }

    /// Builds the forward pass on `g`; parameters become leaves when
    /// `trainable`, constants otherwise.
    pub fn forward_var<T: Real>(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<NetVars> {
        let mut activations = BTreeMap::new();
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut h = x;
        for l in &self.layers {
            let (w, b) = (l.weight.cast::<T>(), l.bias.cast::<T>());
            let (w, b) = if trainable { (g.leaf(w), g.leaf(b)) } else { (g.constant(w), g.constant(b)) };
            params.extend([w, b]);
            h = g.conv2d(h, w, b, l.dilation)?;
            if l.relu {
                h = g.relu(h);
            }
            activations.insert(l.name.clone(), h);
        }
        Ok(NetVars { logits: h, activations, params })
    }

    pub fn save(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::new();
        for l in &self.layers {
            let (wf, bf) = (format!("{}.weight.npy", l.name), format!("{}.bias.npy", l.name));
            npy_write(&l.weight, dir.join(&wf))?;
            npy_write(&l.bias, dir.join(&bf))?;
            records.push(LayerRecord {
                name: l.name.clone(),
                weight: wf,
                bias: bf,
                weight_shape: l.weight.shape().to_vec(),
                dilation: l.dilation,
                relu: l.relu,
            });
        }
        let manifest = WeightManifest { model_id: MODEL_ID.to_string(), seed, layers: records };
        let path = dir.join(WEIGHTS_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(WEIGHTS_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: WeightManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let reference = ToySegNet::init(0);
        if m.layers.len() != reference.layers.len() {
            return Err(Error::Format(format!("{} layers in weight manifest", m.layers.len())));
        }
        let mut layers = Vec::new();
        for (r, want) in m.layers.iter().zip(&reference.layers) {
            let weight = npy_read(dir.join(&r.weight))?;
            let bias = npy_read(dir.join(&r.bias))?;
            if r.name != want.name || weight.shape() != want.weight.shape() || bias.shape() != want.bias.shape() {
                return Err(Error::shape(format!("layer {} does not match the toy architecture", r.name)));
            }
            layers.push(ConvLayer { name: r.name.clone(), weight, bias, dilation: r.dilation, relu: r.relu });
        }
        Ok(ToySegNet { layers })
    }
}

/// Arg-max over the channel axis of `N × H × W` logits; ties go to the lower class.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let (n, h, w) = logits.dims3().expect("rank-3 logits");
    let hw = h * w;
    let z = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..n {
                if z[c * hw + p] > z[best * hw + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_image(h: usize, w: usize) -> Image {
        Image::new(Tensor::from_fn(&[3, h, w], |i| ((i * 37 % 101) as f32) / 100.0)).unwrap()
    }

    #[test]
    fn shapes_follow_channel_plan() {
        let net = ToySegNet::init(3);
        let (logits, trace) = net.forward_trace(&small_image(12, 20)).unwrap();
        assert_eq!(logits.shape(), &[N_CLASSES, 12, 20]);
        for (i, name) in LAYER_NAMES.iter().enumerate() {
            assert_eq!(trace.get(name).unwrap().shape(), &[CHANNELS[i + 1], 12, 20]);
        }
        assert_eq!(trace.get("L5").unwrap(), &logits);
    }

    #[test]
    fn deterministic_and_graph_consistent() {
        let net = ToySegNet::init(11);
        let x = small_image(10, 14);
        let (a, ta) = net.forward_trace(&x).unwrap();
        let (b, tb) = net.forward_trace(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.tensor().clone());
        let vars = net.forward_var(&mut g, xv, false).unwrap();
        assert_eq!(g.value(vars.logits), &a);
        assert_eq!(g.value(vars.activations["L2"]), ta.get("L2").unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = ToySegNet::init(5);
        net.save(dir.path(), 5).unwrap();
        assert_eq!(ToySegNet::load(dir.path()).unwrap(), net);
    }

    #[test]
    fn rejects_wrong_channels() {
        let net = ToySegNet::init(0);
        let gray = Image::new(Tensor::zeros(&[1, 4, 4])).unwrap();
        assert!(net.forward_trace(&gray).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest() {
        let t = Tensor::new(vec![3, 1, 2], vec![1.0f32, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes(&t), vec![0, 1]);
    }
}
