//! Detection and masking on synthetic traces with a planted over-activation.

mod common;

use zmask::calibration::CalibrationProfile;
use zmask::defense::Defense;
use zmask::fusion::{apply_mask, BinaryMask, FusionParams};
use zmask::heatmap::{shallow_deep_heatmaps, LayerSetConfig, PoolCascadeSpec};
use zmask::learn::{roc_and_cutoff, train_fusion, FusionExample, TrainConfig};
use zmask::metrics::mask_iou;
use zmask::tensor::{Image, Tensor};
use zmask::toy::synth::synth_profile;
use zmask::toy::{synth_trace, SynthLayer, SynthSpec};

const HR: (usize, usize) = (24, 48);

fn setup() -> (Vec<SynthLayer>, LayerSetConfig, CalibrationProfile) {
    let layers = vec![
        SynthLayer::new("S1", 4, 48, 96),
        SynthLayer::new("S2", 6, 48, 96),
        SynthLayer::new("D1", 6, 24, 48),
        SynthLayer::new("D2", 4, 12, 24),
    ];
    let cfg = LayerSetConfig {
        shallow_layers: vec!["S1".into(), "S2".into()],
        deep_layers: vec!["D1".into(), "D2".into()],
        shallow_cascade: PoolCascadeSpec::new(vec![(4, 8), (2, 4), (1, 2)], HR).unwrap(),
        deep_cascade: PoolCascadeSpec::new(vec![(4, 8), (2, 4)], HR).unwrap(),
        std_eps: 1e-6,
    };
    let profile = synth_profile(&layers);
    (layers, cfg, profile)
}

fn spec(layers: &[SynthLayer], region: (f64, f64, f64, f64), gain: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        layers: layers.to_vec(),
        background_std: 1.0,
        blob_region: region,
        blob_gain: gain,
        blob_layers: None,
        seed,
    }
}

fn region(i: u64) -> (f64, f64, f64, f64) {
    let t = 0.1 + 0.05 * (i % 8) as f64;
    let l = 0.05 + 0.08 * (i % 7) as f64;
    (t, l, t + 0.3, l + 0.25)
}

fn footprint(s: &SynthSpec, h: usize, w: usize) -> Tensor {
    let (r0, r1, c0, c1) = s.blob_pixels(h, w);
    Tensor::from_fn(&[1, h, w], |p| ((r0..r1).contains(&(p / w)) && (c0..c1).contains(&(p % w))) as u8 as f32)
}

#[test]
fn trained_defense_flags_and_localizes_planted_blobs() {
    let (layers, cfg, profile) = setup();
    let examples: Vec<FusionExample> = (0..12)
        .map(|i| {
            let s = spec(&layers, region(i), 5.0, i);
            let (hs, hd) = shallow_deep_heatmaps(&synth_trace(&s, &profile).unwrap(), &profile, &cfg).unwrap();
            FusionExample { hs, hd, target: footprint(&s, HR.0, HR.1) }
        })
        .collect();
    let out = train_fusion(&examples, &TrainConfig::default()).unwrap();
    assert_eq!(out.epoch_losses.len(), 15);
    assert!(out.final_loss() < 0.5 * out.initial_loss);

    let mut defense = Defense::new(profile.clone(), cfg.clone(), out.params).unwrap();
    let analyze = |d: &Defense, s: &SynthSpec| d.analyze(&synth_trace(s, &profile).unwrap(), 96, 192).unwrap();
    let clean: Vec<SynthSpec> = (0..12).map(|i| spec(&layers, region(i), 0.0, 100 + i)).collect();
    let blobs: Vec<SynthSpec> = (0..12).map(|i| spec(&layers, region(i), 5.0, 200 + i)).collect();
    let scores: Vec<f64> = clean.iter().chain(&blobs).map(|s| analyze(&defense, s).score).collect();
    let labels: Vec<bool> = (0..24).map(|i| i >= 12).collect();
    let (roc, lambda0) = roc_and_cutoff(&scores, &labels).unwrap();
    assert_eq!(roc.auc, 1.0);
    defense.params = FusionParams { lambda0, ..defense.params };

    for i in 0..6 {
        let held_clean = analyze(&defense, &spec(&layers, region(i + 3), 0.0, 500 + i));
        assert!(!held_clean.flagged);
        assert!(held_clean.mask.is_all_ones());
        let s = spec(&layers, region(i + 3), 5.0, 600 + i);
        let held_blob = analyze(&defense, &s);
        assert!(held_blob.flagged, "blob {i} scored {} against {lambda0}", held_blob.score);
        let iou = mask_iou(&held_blob.mask.removed(), &footprint(&s, 96, 192)).unwrap();
        assert!(iou > 0.5, "blob {i}: mask IoU {iou}");
    }
}

#[test]
fn unflagged_images_pass_through_unchanged() {
    let img = Image::new(Tensor::from_fn(&[3, 4, 6], |i| (i % 11) as f32 / 10.0)).unwrap();
    assert_eq!(apply_mask(&img, &BinaryMask::all_ones(4, 6)).unwrap(), img);
    let half = BinaryMask::new(Tensor::from_fn(&[1, 4, 6], |p| (p % 6 < 3) as u8 as f32)).unwrap();
    let masked = apply_mask(&img, &half).unwrap();
    for c in 0..3 {
        for p in 0..24 {
            let v = masked.tensor().data()[c * 24 + p];
            assert_eq!(v, if p % 6 < 3 { img.tensor().data()[c * 24 + p] } else { 0.0 });
        }
    }
}

#[test]
fn missing_profile_layer_is_rejected() {
    let (_, cfg, mut profile) = setup();
    profile.layers.remove("D2");
    assert!(matches!(Defense::new(profile, cfg, FusionParams::default()), Err(zmask::Error::MissingLayer(_))));
}
