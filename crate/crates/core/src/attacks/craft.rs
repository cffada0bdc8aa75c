//! Universal patch optimization with expectation over transformations.
//!
//! Each epoch draws `eot_samples` (scene, γ) pairs, averages each loss's
//! gradient over them, normalizes it, mixes the losses by weight and takes
//! one ADAM step followed by projection onto `[0, 1]`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::losses::{combine_gradients, default_palette, loss_oz_var, loss_task_untargeted_var};
use crate::calibration::{CalibrationProfile, DEFAULT_STD_EPS};
use crate::defense::Defense;
use crate::error::{Error, Result};
use crate::learn::adam::Adam;
use crate::learn::graph::{Graph, Var};
use crate::par;
use crate::tensor::{npy_write, Tensor};
use crate::toy::transform::{apply_patch, apply_patch_var, sample_transform, TransformRanges};
use crate::toy::{SyntheticScene, ToySegNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackMode {
    /// `w_adv·L_task + w_N·L_N + w_S·L_S`.
    Plain,
    /// `(1−β)·L_OZ + β·L_task`, plus the regularizers.
    BetaMixed { beta: f64 },
    /// `(1−α)·(−BCE(M̃, M̄)) + α·L_task`.
    AdvMask { alpha: f64 },
    /// `(1−α)·(−BCE(σ(d − λ0), 1)) + α·L_task`.
    AdvFlag { alpha: f64 },
}

impl AttackMode {
    pub fn label(&self) -> String {
        match self {
            AttackMode::Plain => "plain".into(),
            AttackMode::BetaMixed { beta } => format!("beta-{beta:.2}"),
            AttackMode::AdvMask { alpha } => format!("adv-mask-{alpha:.2}"),
            AttackMode::AdvFlag { alpha } => format!("adv-flag-{alpha:.2}"),
        }
    }

    fn mix(&self) -> Option<f64> {
        match *self {
            AttackMode::Plain => None,
            AttackMode::BetaMixed { beta: m } | AttackMode::AdvMask { alpha: m } | AttackMode::AdvFlag { alpha: m } => {
                Some(m)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub w_adv: f64,
    pub w_n: f64,
    pub w_s: f64,
    /// `None` selects the bundled 32-colour palette.
    pub palette: Option<Vec<[f32; 3]>>,
    pub epochs: usize,
    pub lr: f64,
    pub eot_samples: usize,
    /// Number of leading scenes used for training.
    pub train_images: usize,
    pub patch_hw: (usize, usize),
    pub seed: u64,
    pub ranges: TransformRanges,
    /// Layers of the over-activation loss.
    pub oz_layers: Vec<String>,
    pub std_eps: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: AttackMode::Plain,
            w_adv: 1.0,
            w_n: 0.0,
            w_s: 0.1,
            palette: None,
            epochs: 60,
            lr: 0.1,
            eot_samples: 4,
            train_images: 32,
            patch_hw: (24, 48),
            seed: 0,
            ranges: TransformRanges::default(),
            oz_layers: vec!["L1".into(), "L2".into()],
            std_eps: DEFAULT_STD_EPS,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.w_adv, self.w_n, self.w_s, self.lr].iter().all(|v| v.is_finite());
        if !finite || self.w_adv < 0.0 || self.w_n < 0.0 || self.w_s < 0.0 || self.lr <= 0.0 {
            return Err(Error::invalid("attack weights must be finite and non-negative, lr positive"));
        }
        if let Some(m) = self.mode.mix() {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::invalid(format!("mixing weight {m} outside [0, 1]")));
            }
        }
        if self.w_n > 0.0 && self.palette.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::invalid("palette must be non-empty when w_n > 0"));
        }
        if self.eot_samples == 0 || self.train_images == 0 || self.patch_hw.0 == 0 || self.patch_hw.1 == 0 {
            return Err(Error::invalid("eot_samples, train_images and patch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Task,
    OverActivation,
    Mask,
    Flag,
    NonPrintability,
    Smoothness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: AttackMode,
    pub seed: u64,
    pub epochs: usize,
    pub eot_samples: usize,
    pub train_images: usize,
    pub patch_hw: (usize, usize),
    /// Loss values on the last epoch's samples.
    pub final_losses: BTreeMap<Term, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CraftedPatch {
    /// `3 × H̃ × W̃`, values in `[0, 1]`.
    pub patch: Tensor,
    pub provenance: Provenance,
    /// Weighted objective per epoch, before that epoch's step.
    pub losses: Vec<f64>,
}

impl CraftedPatch {
    /// Writes `<stem>.npy` and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        npy_write(&self.patch, dir.join(format!("{stem}.npy")))?;
        let json = serde_json::json!({ "provenance": self.provenance, "losses": self.losses });
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&json).expect("serializes")).map_err(|e| Error::io(&path, e))
    }
}

struct Objective<'a> {
    net: &'a ToySegNet,
    profile: Option<&'a CalibrationProfile>,
    defense: Option<&'a Defense>,
    cfg: &'a AttackConfig,
    /// Scene-dependent terms and their weights.
    terms: Vec<(Term, f64)>,
}

impl Objective<'_> {
    /// Values and patch gradients of every scene-dependent term on one sample.
    fn sample(&self, scene: &SyntheticScene, patch: &Tensor, seed: u64) -> Result<Vec<(f64, Tensor)>> {
        let t = sample_transform(seed, &self.cfg.ranges, self.cfg.patch_hw, (scene.height(), scene.width()))?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(scene.image.tensor().clone());
        let p = g.leaf(patch.clone());
        let xt = apply_patch_var(&mut g, x, p, &t)?;
        let vars = self.net.forward_var(&mut g, xt, false)?;
        let needs_footprint = self.terms.iter().any(|(t, _)| matches!(t, Term::OverActivation | Term::Mask));
        let footprint = if needs_footprint { Some(apply_patch(&scene.image, patch, &t)?.footprint) } else { None };
        let mut defense_vars = None;
        let mut outs = Vec::with_capacity(self.terms.len());
        for &(term, _) in &self.terms {
            let loss: Var = match term {
                Term::Task => loss_task_untargeted_var(&mut g, vars.logits, &scene.labels)?,
                Term::OverActivation => {
                    let profile = self.profile.ok_or_else(|| Error::invalid("over-activation loss needs a profile"))?;
                    let fp = footprint.as_ref().expect("computed above");
                    loss_oz_var(&mut g, &vars.activations, profile, &self.cfg.oz_layers, fp, self.cfg.std_eps)?
                }
                Term::Mask | Term::Flag => {
                    let defense = self.defense.ok_or_else(|| Error::invalid("defense-aware loss needs a defense"))?;
                    let dv = match defense_vars {
                        Some(dv) => dv,
                        None => *defense_vars.insert(defense.build(&mut g, &vars.activations)?),
                    };
                    let bce = if term == Term::Mask {
                        let (h, w) = defense.layers.resize_dims();
                        let target = crate::tensor::resize_nearest(footprint.as_ref().expect("computed above"), h, w)?;
                        g.bce(dv.soft, &target)?
                    } else {
                        let shifted = g.affine(dv.score, 1.0, -defense.params.lambda0 as f32);
                        let prob = g.sigmoid(shifted);
                        let ones = Tensor::ones(g.value(prob).shape());
                        g.bce(prob, &ones)?
                    };
                    g.affine(bce, -1.0, 0.0)
                }
                Term::NonPrintability | Term::Smoothness => unreachable!("patch-only terms"),
            };
            let value = g.scalar(loss) as f64;
            let grads = g.backward(loss)?;
            outs.push((value, grads.get_or_zeros(p, patch.shape())));
        }
        Ok(outs)
    }
}

fn scene_terms(cfg: &AttackConfig) -> Vec<(Term, f64)> {
    let w = cfg.w_adv;
    let terms = match cfg.mode {
        AttackMode::Plain => vec![(Term::Task, w)],
        AttackMode::BetaMixed { beta } => vec![(Term::Task, beta * w), (Term::OverActivation, (1.0 - beta) * w)],
        AttackMode::AdvMask { alpha } => vec![(Term::Task, alpha * w), (Term::Mask, (1.0 - alpha) * w)],
        AttackMode::AdvFlag { alpha } => vec![(Term::Task, alpha * w), (Term::Flag, (1.0 - alpha) * w)],
    };
    terms.into_iter().filter(|&(_, w)| w > 0.0).collect()
}

fn run(
    net: &ToySegNet,
    scenes: &[SyntheticScene],
    profile: Option<&CalibrationProfile>,
    defense: Option<&Defense>,
    cfg: &AttackConfig,
) -> Result<CraftedPatch> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("no training scenes"));
    }
    let train = &scenes[..cfg.train_images.min(scenes.len())];
    let palette = cfg.palette.clone().unwrap_or_else(default_palette);
    let objective = Objective { net, profile, defense, cfg, terms: scene_terms(cfg) };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ph, pw) = cfg.patch_hw;
    let mut params = vec![Tensor::from_fn(&[3, ph, pw], |_| rng.random::<f32>())];
    let mut adam = Adam::new(cfg.lr, &params);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut last = BTreeMap::new();

    for epoch in 0..cfg.epochs {
        let draws: Vec<(usize, u64)> =
            (0..cfg.eot_samples).map(|_| (rng.random_range(0..train.len()), rng.random())).collect();
        let patch = &params[0];
        let per_sample = par::map(&draws, |&(i, s)| objective.sample(&train[i], patch, s));

        let k = objective.terms.len();
        let mut values = vec![0.0f64; k];
        let mut grads: Vec<Vec<f64>> = vec![vec![0.0; patch.numel()]; k];
        for outs in per_sample {
            for (j, (v, g)) in outs?.into_iter().enumerate() {
                values[j] += v / draws.len() as f64;
                grads[j].iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b as f64 / draws.len() as f64);
            }
        }
        let mut weighted: Vec<(Tensor, f64)> = Vec::new();
        let mut objective_value = 0.0;
        last.clear();
        for (j, &(term, w)) in objective.terms.iter().enumerate() {
            let g = Tensor::new(patch.shape().to_vec(), grads[j].iter().map(|&v| v as f32).collect())?;
            weighted.push((g, w));
            objective_value += w * values[j];
            last.insert(term, values[j]);
        }
        for (term, w) in [(Term::NonPrintability, cfg.w_n), (Term::Smoothness, cfg.w_s)] {
            if w <= 0.0 {
                continue;
            }
            let mut g = Graph::<f32>::new();
            let p = g.leaf(patch.clone());
            let l = if term == Term::Smoothness { g.smoothness(p)? } else { g.non_printability(p, &palette)? };
            let value = g.scalar(l) as f64;
            weighted.push((g.backward(l)?.get_or_zeros(p, patch.shape()), w));
            objective_value += w * value;
            last.insert(term, value);
        }
        if !objective_value.is_finite() {
            return Err(Error::Divergence { step: epoch });
        }
        losses.push(objective_value);
        let step = combine_gradients(&weighted)?;
        adam.step(&mut params, &[step])?;
        params[0] = params[0].map(|v| v.clamp(0.0, 1.0));
    }

    let provenance = Provenance {
        mode: cfg.mode,
        seed: cfg.seed,
        epochs: cfg.epochs,
        eot_samples: cfg.eot_samples,
        train_images: train.len(),
        patch_hw: cfg.patch_hw,
        final_losses: last,
    };
    Ok(CraftedPatch { patch: params.pop().expect("one parameter"), provenance, losses })
}

/// Plain or β-mixed patch; the β-mixed mode needs the calibration profile.
pub fn craft_patch(
    net: &ToySegNet,
    scenes: &[SyntheticScene],
    profile: Option<&CalibrationProfile>,
    cfg: &AttackConfig,
) -> Result<CraftedPatch> {
    if matches!(cfg.mode, AttackMode::AdvMask { .. } | AttackMode::AdvFlag { .. }) {
        return Err(Error::invalid("defense-aware modes go through craft_defense_aware"));
    }
    run(net, scenes, profile, None, cfg)
}

/// Adv-Mask or Adv-Flag patch against a trained defense.
pub fn craft_defense_aware(
    net: &ToySegNet,
    defense: &Defense,
    scenes: &[SyntheticScene],
    cfg: &AttackConfig,
) -> Result<CraftedPatch> {
    if !matches!(cfg.mode, AttackMode::AdvMask { .. } | AttackMode::AdvFlag { .. }) {
        return Err(Error::invalid("craft_defense_aware needs an adv-mask or adv-flag mode"));
    }
    run(net, scenes, Some(&defense.profile), Some(defense), cfg)
}
