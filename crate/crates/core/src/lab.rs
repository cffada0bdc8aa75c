//! Experiment building blocks shared by the CLI and the end-to-end tests.

use crate::calibration::CalibrationProfile;
use crate::defense::{Defense, DefenseOutcome};
use crate::error::{Error, Result};
use crate::fusion::apply_mask;
use crate::fusion::FusionParams;
use crate::heatmap::{shallow_deep_heatmaps, LayerSetConfig};
use crate::learn::roc::{roc_and_cutoff, RocCurve};
use crate::learn::train::{train_fusion, FusionExample, TrainConfig, TrainOutcome};
use crate::metrics::Confusion;
use crate::par;
use crate::tensor::{Image, Tensor};
use crate::toy::transform::{apply_patch, sample_transform, PatchedImage, TransformRanges, TransformSpec};
use crate::toy::{SyntheticScene, ToySegNet, N_CLASSES};

/// Per-layer statistics over clean scenes, folded in scene order.
pub fn calibrate(net: &ToySegNet, scenes: &[SyntheticScene], dataset_id: &str) -> Result<CalibrationProfile> {
    if scenes.is_empty() {
        return Err(Error::invalid("calibration needs at least one scene"));
    }
    let traces = par::map(scenes, |s| net.forward_trace(&s.image).map(|r| r.1));
    let mut profile = CalibrationProfile::new(crate::toy::net::MODEL_ID, dataset_id);
    for t in traces {
        let t = t?;
        profile.observe(t.iter())?;
    }
    Ok(profile)
}

/// One transform per scene, reproducible from `seed`.
pub fn placements(
    scenes: &[SyntheticScene],
    patch_hw: (usize, usize),
    ranges: &TransformRanges,
    seed: u64,
) -> Result<Vec<TransformSpec>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mix = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            sample_transform(mix, ranges, patch_hw, (s.height(), s.width()))
        })
        .collect()
}

pub fn patch_scenes(
    scenes: &[SyntheticScene],
    patch: &Tensor,
    transforms: &[TransformSpec],
) -> Result<Vec<PatchedImage>> {
    if scenes.len() != transforms.len() {
        return Err(Error::shape("one transform per scene expected"));
    }
    let pairs: Vec<(&SyntheticScene, &TransformSpec)> = scenes.iter().zip(transforms).collect();
    par::map(&pairs, |(s, t)| apply_patch(&s.image, patch, t)).into_iter().collect()
}

/// Heatmaps of patched images paired with their footprints at heatmap resolution.
pub fn fusion_examples(
    net: &ToySegNet,
    profile: &CalibrationProfile,
    layers: &LayerSetConfig,
    patched: &[PatchedImage],
) -> Result<Vec<FusionExample>> {
    let (h, w) = layers.resize_dims();
    par::map(patched, |p| {
        let (_, trace) = net.forward_trace(&p.image)?;
        let (hs, hd) = shallow_deep_heatmaps(&trace, profile, layers)?;
        Ok(FusionExample { hs, hd, target: p.footprint_at(h, w) })
    })
    .into_iter()
    .collect()
}

pub fn analyze_all(defense: &Defense, net: &ToySegNet, images: &[&Image]) -> Result<Vec<DefenseOutcome>> {
    par::map(images, |img| {
        let (_, trace) = net.forward_trace(img)?;
        defense.analyze(&trace, img.height(), img.width())
    })
    .into_iter()
    .collect()
}

/// Dataset mIoU of `net` on `images` against the scenes' labels, skipping
/// pixels in the matching `exclude` footprints. With a defense, every image
/// is masked first.
pub fn dataset_miou(
    net: &ToySegNet,
    scenes: &[SyntheticScene],
    images: &[&Image],
    exclude: Option<&[&Tensor]>,
    defense: Option<&Defense>,
) -> Result<f64> {
    if scenes.len() != images.len() || exclude.is_some_and(|e| e.len() != scenes.len()) {
        return Err(Error::shape("scenes, images and footprints must align"));
    }
    let preds = par::map(images, |img| {
        let input = match defense {
            Some(d) => {
                let (_, trace) = net.forward_trace(img)?;
                let out = d.analyze(&trace, img.height(), img.width())?;
                apply_mask(img, &out.mask)?
            }
            None => (*img).clone(),
        };
        net.predict(&input)
    });
    let mut conf = Confusion::new(N_CLASSES);
    for (i, p) in preds.into_iter().enumerate() {
        conf.add(&p?, &scenes[i].labels, exclude.map(|e| e[i].data()))?;
    }
    Ok(conf.miou())
}

/// Offset between a run seed and the placement seed of its first patch.
pub const PLACEMENT_SEED_OFFSET: u64 = 100;

/// Every scene patched with every patch; patch `i` uses placement seed `seed + i`.
pub fn patched_training_set(
    scenes: &[SyntheticScene],
    patches: &[Tensor],
    ranges: &TransformRanges,
    seed: u64,
) -> Result<Vec<PatchedImage>> {
    let mut out = Vec::with_capacity(scenes.len() * patches.len());
    for (i, p) in patches.iter().enumerate() {
        let (_, ph, pw) = p.dims3()?;
        let tr = placements(scenes, (ph, pw), ranges, seed.wrapping_add(i as u64))?;
        out.extend(patch_scenes(scenes, p, &tr)?);
    }
    Ok(out)
}

pub struct FittedDefense {
    pub defense: Defense,
    pub training: TrainOutcome,
    pub roc: RocCurve,
}

/// Trains the soft-threshold blocks on `patched`, then picks the detection
/// threshold from the ROC of clean `scenes` (negatives) against `patched`.
pub fn fit_defense(
    net: &ToySegNet,
    profile: &CalibrationProfile,
    layers: &LayerSetConfig,
    scenes: &[SyntheticScene],
    patched: &[PatchedImage],
    cfg: &TrainConfig,
) -> Result<FittedDefense> {
    let examples = fusion_examples(net, profile, layers, patched)?;
    let training = train_fusion(&examples, cfg)?;
    let mut defense = Defense::new(profile.clone(), layers.clone(), training.params)?;
    let mut images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    images.extend(patched.iter().map(|p| &p.image));
    let labels: Vec<bool> = (0..images.len()).map(|i| i >= scenes.len()).collect();
    let scores: Vec<f64> = analyze_all(&defense, net, &images)?.iter().map(|o| o.score).collect();
    let (roc, lambda0) = roc_and_cutoff(&scores, &labels)?;
    defense.params = FusionParams { lambda0, ..defense.params };
    Ok(FittedDefense { defense, training, roc })
}
