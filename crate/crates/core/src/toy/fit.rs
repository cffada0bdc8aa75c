//! Light cross-entropy fitting of the toy network on procedural scenes.

use crate::error::{Error, Result};
use crate::learn::adam::Adam;
use crate::learn::graph::Graph;
use crate::toy::net::ToySegNet;
use crate::toy::scene::SyntheticScene;

/// Runs `steps` ADAM steps, cycling through `scenes` one per step, and
/// returns the loss before each step.
pub fn fit_toy(net: &mut ToySegNet, scenes: &[SyntheticScene], steps: usize, lr: f64) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to fit on"));
    }
    let mut params = net.params();
    let mut adam = Adam::new(lr, &params);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let scene = &scenes[step % scenes.len()];
        let mut g = Graph::<f32>::new();
        let x = g.constant(scene.image.tensor().clone());
        let vars = net.forward_var(&mut g, x, true)?;
        let loss = g.cross_entropy(vars.logits, &scene.labels)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let gs: Vec<_> = vars.params.iter().zip(&params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();
        adam.step(&mut params, &gs)?;
        net.set_params(params.clone())?;
    }
    Ok(losses)
}
