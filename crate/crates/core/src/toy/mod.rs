//! Desk-scale stand-ins for a real model and dataset.

pub mod fit;
pub mod net;
pub mod scene;
pub mod synth;
pub mod transform;

pub use net::{argmax_classes, ToySegNet, LAYER_NAMES, N_CLASSES};
pub use scene::{corpus, generate_scene, SyntheticScene};
pub use synth::{synth_profile, synth_trace, SynthLayer, SynthSpec};
pub use transform::{apply_patch, apply_patch_var, sample_transform, PatchedImage, TransformRanges, TransformSpec};
