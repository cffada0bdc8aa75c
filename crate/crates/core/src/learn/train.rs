//! Supervised fitting of the eight soft-threshold parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fusion_var, FusionParams, FusionVars};
use crate::heatmap::Heatmap;
use crate::learn::adam::Adam;
use crate::learn::graph::Graph;
use crate::par;
use crate::tensor::Tensor;

/// One training example: heatmaps and the ground-truth patch footprint
/// (1 = patch pixel) at heatmap resolution.
#[derive(Clone, Debug)]
pub struct FusionExample {
    pub hs: Heatmap,
    pub hd: Heatmap,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Examples per ADAM step; an epoch is one pass over the shuffled data.
    pub batch_size: usize,
    pub seed: u64,
    pub init: FusionParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 15, lr: 0.01, batch_size: 1, seed: 0, init: FusionParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Trained parameters; `lambda0` is copied from the initial value.
    pub params: FusionParams,
    /// Mean BCE over the dataset before the first step.
    pub initial_loss: f64,
    /// Mean BCE over the dataset after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }

    /// `epoch,loss` rows, epoch 0 being the initial loss.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in std::iter::once(self.initial_loss).chain(self.epoch_losses.iter().copied()).enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

/// BCE of one example and its gradient with respect to the eight scalars.
pub fn example_loss_grad(p: &FusionParams, ex: &FusionExample) -> Result<(f64, [f64; 8])> {
    let mut g = Graph::<f64>::new();
    let vars = FusionVars::place(&mut g, p, true);
    let hs = g.constant(ex.hs.tensor().cast());
    let hd = g.constant(ex.hd.tensor().cast());
    let m = fusion_var(&mut g, hs, hd, &vars)?;
    let loss = g.bce(m, &ex.target.cast())?;
    let grads = g.backward(loss)?;
    let mut out = [0.0; 8];
    for (o, v) in out.iter_mut().zip(vars.vars()) {
        *o = grads.get(v).map_or(0.0, |t| t.data()[0]);
    }
    Ok((g.scalar(loss), out))
}

pub fn dataset_loss(p: &FusionParams, data: &[FusionExample]) -> Result<f64> {
    let losses = par::map(data, |ex| example_loss_grad(p, ex).map(|r| r.0));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

fn check_example(ex: &FusionExample) -> Result<()> {
    ex.hs.tensor().expect_same_shape(ex.hd.tensor())?;
    ex.hs.tensor().expect_same_shape(&ex.target)?;
    if ex.target.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("fusion targets must lie in [0, 1]"));
    }
    Ok(())
}

/// ADAM-minimizes the mean BCE between the soft mask and the footprint.
pub fn train_fusion(data: &[FusionExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    cfg.init.validate()?;
    data.iter().try_for_each(check_example)?;

    let mut params = vec![Tensor::<f64>::new(vec![8], cfg.init.to_array().to_vec())?];
    let mut adam = Adam::new(cfg.lr, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let current = |params: &[Tensor<f64>]| {
        let a: [f64; 8] = params[0].data().try_into().expect("eight scalars");
        FusionParams::from_array(a, cfg.init.lambda0)
    };

    let initial_loss = dataset_loss(&cfg.init, data)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let p = current(&params);
            let results = par::map(batch, |&i| example_loss_grad(&p, &data[i]));
            let mut grad = [0.0; 8];
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { step: epoch });
                }
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b / batch.len() as f64);
            }
            adam.step(&mut params, &[Tensor::new(vec![8], grad.to_vec())?])?;
        }
        let loss = dataset_loss(&current(&params), data)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: epoch });
        }
        epoch_losses.push(loss);
    }
    Ok(TrainOutcome { params: current(&params), initial_loss, epoch_losses })
}
