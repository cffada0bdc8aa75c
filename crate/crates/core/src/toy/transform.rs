//! Patch transforms γ and the patch application function.
//!
//! Appearance is applied in a fixed order: contrast about 0.5, brightness,
//! per-pixel Gaussian noise, then clamping to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::graph::{Graph, Var};
use crate::tensor::{resize_bilinear, resize_nearest, Image, Real, Tensor};

/// Placement attempts before giving up.
const MAX_PLACEMENT_TRIES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub noise_std: (f32, f32),
    pub scale: (f32, f32),
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges { brightness: (-0.1, 0.1), contrast: (0.8, 1.2), noise_std: (0.0, 0.03), scale: (0.8, 1.2) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub brightness_delta: f32,
    pub contrast_factor: f32,
    pub noise_std: f32,
    /// Seed of the per-pixel noise field.
    pub noise_seed: u64,
    /// Top-left corner of the scaled patch, (row, col).
    pub translation: (usize, usize),
    pub scale_factor: f32,
}

impl TransformSpec {
    /// No appearance change and no scaling.
    pub fn identity(top: usize, left: usize) -> Self {
        TransformSpec {
            brightness_delta: 0.0,
            contrast_factor: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
            translation: (top, left),
            scale_factor: 1.0,
        }
    }

    pub fn scaled_dims(&self, ph: usize, pw: usize) -> (usize, usize) {
        scaled_dims(ph, pw, self.scale_factor)
    }
}

pub fn scaled_dims(ph: usize, pw: usize, scale: f32) -> (usize, usize) {
    let s = |n: usize| ((n as f64 * scale as f64).round() as usize).max(1);
    (s(ph), s(pw))
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Independent uniform draws within `ranges`; the placement is resampled
/// until the scaled patch fits inside the image.
pub fn sample_transform(
    seed: u64,
    ranges: &TransformRanges,
    patch_hw: (usize, usize),
    image_hw: (usize, usize),
) -> Result<TransformSpec> {
    let (min_h, min_w) = scaled_dims(patch_hw.0, patch_hw.1, ranges.scale.0);
    if min_h > image_hw.0 || min_w > image_hw.1 {
        return Err(Error::invalid(format!(
            "patch {patch_hw:?} does not fit image {image_hw:?} even at scale {}",
            ranges.scale.0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brightness_delta = uniform(&mut rng, ranges.brightness);
    let contrast_factor = uniform(&mut rng, ranges.contrast);
    let noise_std = uniform(&mut rng, ranges.noise_std);
    let noise_seed = rng.random();
    for _ in 0..MAX_PLACEMENT_TRIES {
        let scale_factor = uniform(&mut rng, ranges.scale);
        let (sh, sw) = scaled_dims(patch_hw.0, patch_hw.1, scale_factor);
        let top = rng.random_range(0..image_hw.0);
        let left = rng.random_range(0..image_hw.1);
        if top + sh <= image_hw.0 && left + sw <= image_hw.1 {
            return Ok(TransformSpec {
                brightness_delta,
                contrast_factor,
                noise_std,
                noise_seed,
                translation: (top, left),
                scale_factor,
            });
        }
    }
    Err(Error::invalid("could not place the patch inside the image"))
}

/// A patched image and the patch footprint (1 = patch pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchedImage {
    pub image: Image,
    pub footprint: Tensor,
}

impl PatchedImage {
    /// Footprint resampled by nearest neighbour, e.g. to heatmap resolution.
    pub fn footprint_at(&self, h: usize, w: usize) -> Tensor {
        resize_nearest(&self.footprint, h, w).expect("rank-3 footprint")
    }
}

fn noise_field<T: Real>(shape: &[usize], std: f32, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let n: f64 = StandardNormal.sample(&mut rng);
        T::of(n * std as f64)
    })
}

fn check_patch<T: Real>(patch: &Tensor<T>, image_hw: (usize, usize), g: &TransformSpec) -> Result<(usize, usize)> {
    let (_, ph, pw) = patch.dims3()?;
    let (sh, sw) = g.scaled_dims(ph, pw);
    let (top, left) = g.translation;
    if top + sh > image_hw.0 || left + sw > image_hw.1 {
        return Err(Error::invalid(format!(
            "patch footprint {sh}x{sw} at ({top}, {left}) leaves the {}x{} image",
            image_hw.0, image_hw.1
        )));
    }
    Ok((sh, sw))
}

/// Resized and appearance-transformed patch, before pasting.
pub fn transform_patch(patch: &Tensor, g: &TransformSpec) -> Result<Tensor> {
    let (_, ph, pw) = patch.dims3()?;
    let (sh, sw) = g.scaled_dims(ph, pw);
    let scaled = resize_bilinear(patch, sh, sw)?;
    let (a, b) = (g.contrast_factor, 0.5 * (1.0 - g.contrast_factor) + g.brightness_delta);
    let mut out = scaled.map(|v| v * a + b);
    if g.noise_std > 0.0 {
        let noise = noise_field::<f32>(out.shape(), g.noise_std, g.noise_seed);
        out = out.zip_map(&noise, |v, n| v + n)?;
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

pub fn apply_patch(x: &Image, patch: &Tensor, g: &TransformSpec) -> Result<PatchedImage> {
    if patch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("patch values must lie in [0, 1]"));
    }
    if patch.dims3()?.0 != x.channels() {
        return Err(Error::shape("patch and image channel counts differ"));
    }
    let (h, w) = (x.height(), x.width());
    let (sh, sw) = check_patch(patch, (h, w), g)?;
    let content = transform_patch(patch, g)?;
    let (top, left) = g.translation;
    let mut data = x.tensor().data().to_vec();
    let mut footprint = Tensor::zeros(&[1, h, w]);
    for c in 0..x.channels() {
        for y in 0..sh {
            let d = (c * h + top + y) * w + left;
            data[d..d + sw].copy_from_slice(&content.data()[(c * sh + y) * sw..(c * sh + y + 1) * sw]);
        }
    }
    for y in 0..sh {
        let d = (top + y) * w + left;
        footprint.data_mut()[d..d + sw].fill(1.0);
    }
    Ok(PatchedImage { image: Image::new(Tensor::new(x.tensor().shape().to_vec(), data)?)?, footprint })
}

/// Differentiable version of [`apply_patch`] with respect to the patch;
/// `image` is a constant node. Placement is not differentiated.
pub fn apply_patch_var<T: Real>(g: &mut Graph<T>, image: Var, patch: Var, t: &TransformSpec) -> Result<Var> {
    let (_, h, w) = g.value(image).dims3()?;
    let (sh, sw) = check_patch(g.value(patch), (h, w), t)?;
    let scaled = g.resize(patch, sh, sw)?;
    let a = T::of(t.contrast_factor as f64);
    let b = T::of(0.5 * (1.0 - t.contrast_factor as f64) + t.brightness_delta as f64);
    let mut content = g.affine(scaled, a, b);
    if t.noise_std > 0.0 {
        let shape = g.value(content).shape().to_vec();
        let noise = g.constant(noise_field::<T>(&shape, t.noise_std, t.noise_seed));
        content = g.add(content, noise)?;
    }
    let content = g.clamp(content, T::zero(), T::one());
    g.paste(image, content, t.translation.0, t.translation.1)
}
