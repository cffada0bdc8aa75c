//! Attack objectives and per-loss gradient combination.

use std::collections::BTreeMap;

use crate::calibration::{zscore, CalibrationProfile};
use crate::error::{Error, Result};
use crate::heatmap::zscore_var;
use crate::learn::graph::{Graph, Var};
use crate::tensor::{resize_nearest, Real, Tensor};
use crate::trace::ActivationTrace;

/// `−CE`: minimizing it maximizes the task loss.
pub fn loss_task_untargeted_var<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let ce = g.cross_entropy(logits, labels)?;
    Ok(g.affine(ce, -T::one(), T::zero()))
}

pub fn loss_task_untargeted(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let l = g.constant(logits.clone());
    let v = loss_task_untargeted_var(&mut g, l, labels)?;
    Ok(g.scalar(v) as f64)
}

/// Footprint resampled to a layer's spatial dims, with its pixel count.
fn layer_footprint(footprint: &Tensor, h: usize, w: usize, layer: &str) -> Result<(Tensor, f64)> {
    let m = resize_nearest(footprint, h, w)?;
    let area = m.sum();
    if area <= 0.0 {
        return Err(Error::invalid(format!("patch footprint is empty at layer {layer}")));
    }
    Ok((m, area))
}

/// Mean over layers of `(1 / (|M̄|·C)) Σ_c |Σ_{i,j} z_c ⊙ M̄|`, with `M̄`
/// (footprint at input resolution, `1×H×W`) resampled to each layer.
pub fn loss_oz(
    trace: &ActivationTrace,
    profile: &CalibrationProfile,
    layers: &[String],
    footprint: &Tensor,
    std_eps: f64,
) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::invalid("no layers for the over-activation loss"));
    }
    let mut total = 0.0;
    for name in layers {
        let z = zscore(&trace.get(name)?.cast::<f64>(), profile.layer(name)?, std_eps)?;
        let (c, h, w) = z.dims3()?;
        let (m, area) = layer_footprint(footprint, h, w, name)?;
        let per_channel: f64 =
            (0..c).map(|ch| z.plane(ch).iter().zip(m.data()).map(|(&a, &b)| a * b as f64).sum::<f64>().abs()).sum();
        total += per_channel / (c as f64 * area);
    }
    Ok(total / layers.len() as f64)
}

pub fn loss_oz_var<T: Real>(
    g: &mut Graph<T>,
    activations: &BTreeMap<String, Var>,
    profile: &CalibrationProfile,
    layers: &[String],
    footprint: &Tensor,
    std_eps: f64,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("no layers for the over-activation loss"));
    }
    let mut terms = Vec::with_capacity(layers.len());
    for name in layers {
        let act = *activations.get(name).ok_or_else(|| Error::MissingLayer(name.clone()))?;
        let z = zscore_var(g, act, profile.layer(name)?, std_eps)?;
        let (_, h, w) = g.value(z).dims3()?;
        let (m, area) = layer_footprint(footprint, h, w, name)?;
        let sums = g.channel_masked_sum(z, &m.cast())?;
        let sums = g.abs(sums);
        let mean = g.mean(sums);
        terms.push(g.affine(mean, T::of(1.0 / area), T::zero()));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.affine(acc, T::of(1.0 / layers.len() as f64), T::zero()))
}

/// Sum of squared forward differences over rows and columns, all channels.
pub fn loss_smooth(patch: &Tensor) -> Result<f64> {
    let (c, h, w) = patch.dims3()?;
    let mut s = 0.0f64;
    for ch in 0..c {
        let p = patch.plane(ch);
        for i in 0..h {
            for j in 0..w {
                let v = p[i * w + j] as f64;
                if i + 1 < h {
                    s += (p[(i + 1) * w + j] as f64 - v).powi(2);
                }
                if j + 1 < w {
                    s += (p[i * w + j + 1] as f64 - v).powi(2);
                }
            }
        }
    }
    Ok(s)
}

/// Mean over pixels of the product of distances to every palette colour.
pub fn loss_nps(patch: &Tensor, palette: &[[f32; 3]]) -> Result<f64> {
    let (c, h, w) = patch.dims3()?;
    if c != 3 {
        return Err(Error::shape("non-printability needs an RGB patch"));
    }
    if palette.is_empty() {
        return Err(Error::invalid("empty palette"));
    }
    let hw = h * w;
    let d = patch.data();
    let total: f64 = (0..hw)
        .map(|p| {
            palette
                .iter()
                .map(|col| (0..3).map(|k| (d[k * hw + p] as f64 - col[k] as f64).powi(2)).sum::<f64>().sqrt())
                .product::<f64>()
        })
        .sum();
    Ok(total / hw as f64)
}

/// `(1/n) Σ w_i · g_i / ‖g_i‖₂`; zero gradients stay zero.
pub fn combine_gradients(grads: &[(Tensor, f64)]) -> Result<Tensor> {
    let (first, _) = grads.first().ok_or_else(|| Error::invalid("no gradients to combine"))?;
    let mut acc = vec![0.0f64; first.numel()];
    for (g, w) in grads {
        first.expect_same_shape(g)?;
        let norm = g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let k = w / norm;
        acc.iter_mut().zip(g.data()).for_each(|(a, &v)| *a += k * v as f64);
    }
    let n = grads.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Default printable palette: 32 RGB triples.
pub fn default_palette() -> Vec<[f32; 3]> {
    serde_json::from_str(include_str!("../../assets/palette.json")).expect("bundled palette parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::ChannelStats;

    #[test]
    fn smooth_examples() {
        assert_eq!(loss_smooth(&Tensor::full(&[3, 4, 5], 0.3)).unwrap(), 0.0);
        assert_eq!(loss_smooth(&Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap()).unwrap(), 1.0);
        assert_eq!(loss_smooth(&Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap(), 4.0);
    }

    #[test]
    fn nps_examples() {
        let p = Tensor::full(&[3, 1, 1], 0.5);
        let v = loss_nps(&p, &[[0.0; 3], [1.0; 3]]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        let on_palette = Tensor::new(vec![3, 1, 2], vec![0.1, 0.4, 0.1, 0.4, 0.15, 0.85]).unwrap();
        let pal = default_palette();
        assert_eq!(pal.len(), 32);
        assert!(loss_nps(&on_palette, &pal).unwrap() < 1e-6);
    }

    #[test]
    fn combine_examples() {
        let g = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(combine_gradients(&[(g.clone(), 2.0)]).unwrap().data(), &[1.2, 1.6]);
        let neg = g.map(|v| -v);
        assert!(combine_gradients(&[(g.clone(), 1.0), (neg, 1.0)]).unwrap().data().iter().all(|&v| v == 0.0));
        let zero = Tensor::zeros(&[2]);
        assert_eq!(combine_gradients(&[(zero, 1.0), (g.clone(), 1.0)]).unwrap().data(), &[0.3, 0.4]);
        assert!(combine_gradients(&[]).is_err());
    }

    fn unit_profile(name: &str, c: usize) -> CalibrationProfile {
        let mut p = CalibrationProfile::new("t", "t");
        p.layers.insert(name.into(), ChannelStats::from_moments(vec![0.0; c], vec![1.0; c], 1).unwrap());
        p
    }

    #[test]
    fn oz_examples() {
        let fp = Tensor::from_fn(&[1, 4, 5], |i| if i < 10 { 1.0 } else { 0.0 });
        let mut trace = ActivationTrace::new();
        trace.insert("a", Tensor::full(&[1, 4, 5], 2.0));
        let v = loss_oz(&trace, &unit_profile("a", 1), &["a".into()], &fp, 1e-6).unwrap();
        assert!((v - 2.0).abs() < 1e-9);
        let mut trace = ActivationTrace::new();
        trace.insert("a", Tensor::from_fn(&[2, 4, 5], |i| if i < 20 { 2.0 } else { -2.0 }));
        let v = loss_oz(&trace, &unit_profile("a", 2), &["a".into()], &fp, 1e-6).unwrap();
        assert!((v - 2.0).abs() < 1e-9);
        assert!(loss_oz(&trace, &unit_profile("a", 2), &["a".into()], &Tensor::zeros(&[1, 4, 5]), 1e-6).is_err());
    }

    #[test]
    fn oz_graph_matches_plain() {
        let fp = Tensor::from_fn(&[1, 8, 10], |i| if (i / 10) % 8 >= 2 && i % 10 < 4 { 1.0 } else { 0.0 });
        let act = Tensor::from_fn(&[3, 4, 5], |i| ((i * 7) % 11) as f32 - 5.0);
        let mut trace = ActivationTrace::new();
        trace.insert("a", act.clone());
        let profile = unit_profile("a", 3);
        let plain = loss_oz(&trace, &profile, &["a".into()], &fp, 1e-6).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.constant(act.cast());
        let acts = BTreeMap::from([("a".to_string(), v)]);
        let lv = loss_oz_var(&mut g, &acts, &profile, &["a".into()], &fp, 1e-6).unwrap();
        assert!((g.scalar(lv) - plain).abs() < 1e-9);
    }

    #[test]
    fn uniform_logits_task_loss() {
        let v = loss_task_untargeted(&Tensor::zeros(&[4, 2, 3]), &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!((v + 4f64.ln()).abs() < 1e-6);
    }
}
