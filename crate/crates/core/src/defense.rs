//! The assembled defense: trace → heatmaps → soft mask → score → mask.

use std::collections::BTreeMap;

use crate::calibration::CalibrationProfile;
use crate::error::Result;
use crate::fusion::{
    apply_mask, fusion_forward, fusion_var, make_mask, overactivation_score, score_var, BinaryMask, FusionParams,
    FusionVars, SoftMask,
};
use crate::heatmap::{shallow_deep_heatmaps, shallow_deep_vars, Heatmap, LayerSetConfig};
use crate::learn::graph::{Graph, Var};
use crate::tensor::{Image, Real};
use crate::toy::ToySegNet;
use crate::trace::ActivationTrace;

#[derive(Clone, Debug, PartialEq)]
pub struct Defense {
    pub profile: CalibrationProfile,
    pub layers: LayerSetConfig,
    pub params: FusionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseOutcome {
    pub hs: Heatmap,
    pub hd: Heatmap,
    pub soft: SoftMask,
    pub score: f64,
    pub flagged: bool,
    /// At the input-image resolution; all ones when not flagged.
    pub mask: BinaryMask,
}

/// Graph nodes of the differentiable part of the pipeline.
#[derive(Clone, Copy, Debug)]
pub struct DefenseVars {
    pub hs: Var,
    pub hd: Var,
    pub soft: Var,
    pub score: Var,
}

impl Defense {
    pub fn new(profile: CalibrationProfile, layers: LayerSetConfig, params: FusionParams) -> Result<Self> {
        layers.validate()?;
        params.validate()?;
        for name in layers.all_layers() {
            profile.layer(name)?;
        }
        Ok(Defense { profile, layers, params })
    }

    pub fn analyze(&self, trace: &ActivationTrace, out_h: usize, out_w: usize) -> Result<DefenseOutcome> {
        let (hs, hd) = shallow_deep_heatmaps(trace, &self.profile, &self.layers)?;
        let soft = fusion_forward(&hs, &hd, &self.params)?;
        let score = overactivation_score(&hs, &hd, &soft)?;
        let (mask, flagged) = make_mask(&soft, score, self.params.lambda0, out_h, out_w)?;
        Ok(DefenseOutcome { hs, hd, soft, score, flagged, mask })
    }

    /// Runs `net` on `image`, analyzes its trace and returns the masked image.
    pub fn defend(&self, net: &ToySegNet, image: &Image) -> Result<(Image, DefenseOutcome)> {
        let (_, trace) = net.forward_trace(image)?;
        let outcome = self.analyze(&trace, image.height(), image.width())?;
        let masked = apply_mask(image, &outcome.mask)?;
        Ok((masked, outcome))
    }

    /// Heatmaps, soft mask and score on `g`, with fixed fusion parameters.
    pub fn build<T: Real>(&self, g: &mut Graph<T>, activations: &BTreeMap<String, Var>) -> Result<DefenseVars> {
        let (hs, hd) = shallow_deep_vars(g, activations, &self.profile, &self.layers)?;
        let params = FusionVars::place(g, &self.params, false);
        let soft = fusion_var(g, hs, hd, &params)?;
        let score = score_var(g, hs, hd, soft)?;
        Ok(DefenseVars { hs, hd, soft, score })
    }
}
