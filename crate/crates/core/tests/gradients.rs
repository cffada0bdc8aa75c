//! Finite-difference checks of every differentiable operator (f64) and of
//! the composed attack/defense chains (f32 analytic against f64 numeric).

mod common;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zmask::attacks::loss_task_untargeted_var;
use zmask::calibration::CalibrationProfile;
use zmask::fusion::{fusion_var, score_var, FusionParams, FusionVars, SoftThresholdParams, SoftThresholdVars};
use zmask::heatmap::{shallow_deep_vars, LayerSetConfig, PoolCascadeSpec};
use zmask::learn::check::{directional_derivative, rel_err};
use zmask::learn::{Graph, Var};
use zmask::tensor::{Real, Tensor};
use zmask::toy::synth::synth_profile;
use zmask::toy::{
    apply_patch_var, generate_scene, sample_transform, synth_trace, SynthLayer, SynthSpec, SyntheticScene, ToySegNet,
    TransformSpec,
};

const OP_POINTS: u64 = 20;
const OP_TOL: f64 = 1e-4;
const CHAIN_POINTS: u64 = 5;
const CHAIN_TOL: f64 = 1e-3;

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> zmask::Result<Var> + 'a;

/// `Σ y ⊙ r` for a fixed random weight `r`, so vector-valued ops reduce to a scalar.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let r = common::uniform::<f64>(&mut common::rng(seed ^ 0xA5A5), &shape, -1.0, 1.0);
    let r = g.constant(r);
    let m = g.mul(y, r).unwrap();
    g.sum(m)
}

fn eval(build: &Build, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, &vars).unwrap();
    let s = weighted(&mut g, y, seed);
    g.scalar(s)
}

/// Checks the gradient with respect to every input along a random direction.
fn check_op(name: &str, make_inputs: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: &Build) {
    for point in 0..OP_POINTS {
        let mut r = common::rng(point * 7919 + name.len() as u64);
        let inputs = make_inputs(&mut r);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, &vars).unwrap();
        let s = weighted(&mut g, y, point);
        let grads = g.backward(s).unwrap();
        for (k, x) in inputs.iter().enumerate() {
            let dir: Tensor<f64> = common::uniform(&mut r, x.shape(), -1.0, 1.0);
            let analytic: f64 =
                grads.get_or_zeros(vars[k], x.shape()).data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
            let mut f = |probe: &Tensor<f64>| {
                let mut xs = inputs.clone();
                xs[k] = probe.clone();
                eval(build, &xs, point)
            };
            let numeric = directional_derivative(&mut f, x, &dir, 1e-6);
            let e = rel_err(analytic, numeric, 1e-8);
            assert!(e < OP_TOL, "{name} input {k} point {point}: analytic {analytic} numeric {numeric} rel {e}");
        }
    }
}

fn u(shape: &'static [usize], lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> Tensor<f64> {
    move |r| common::uniform(r, shape, lo, hi)
}

#[test]
fn elementwise_binary_ops() {
    let two = |r: &mut ChaCha8Rng| vec![u(&[2, 3, 4], -2.0, 2.0)(r), u(&[2, 3, 4], -2.0, 2.0)(r)];
    check_op("add", &two, &|g, v| g.add(v[0], v[1]));
    check_op("sub", &two, &|g, v| g.sub(v[0], v[1]));
    check_op("mul", &two, &|g, v| g.mul(v[0], v[1]));
    check_op("maximum", &two, &|g, v| g.maximum(v[0], v[1]));
    let div = |r: &mut ChaCha8Rng| vec![u(&[2, 3, 4], -2.0, 2.0)(r), common::away_from_zero(r, &[2, 3, 4], 0.5, 2.0)];
    check_op("div", &div, &|g, v| g.div(v[0], v[1]));
    let scalar_rhs = |r: &mut ChaCha8Rng| vec![u(&[2, 3, 4], -2.0, 2.0)(r), u(&[], 0.5, 2.0)(r)];
    check_op("mul_broadcast", &scalar_rhs, &|g, v| g.mul(v[0], v[1]));
    check_op("add_broadcast", &scalar_rhs, &|g, v| g.add(v[0], v[1]));
    check_op("div_broadcast", &scalar_rhs, &|g, v| g.div(v[0], v[1]));
}

#[test]
fn elementwise_unary_ops() {
    let one = |r: &mut ChaCha8Rng| vec![common::away_from_zero(r, &[2, 4, 5], 0.01, 3.0)];
    check_op("affine", &one, &|g, v| Ok(g.affine(v[0], -1.7, 0.3)));
    check_op("abs", &one, &|g, v| Ok(g.abs(v[0])));
    check_op("relu", &one, &|g, v| Ok(g.relu(v[0])));
    check_op("tanh", &one, &|g, v| Ok(g.tanh(v[0])));
    check_op("sigmoid", &one, &|g, v| Ok(g.sigmoid(v[0])));
    check_op("clamp_min", &one, &|g, v| Ok(g.clamp_min(v[0], 0.005)));
    check_op("clamp", &one, &|g, v| Ok(g.clamp(v[0], -1.0051, 1.0049)));
    let pos = |r: &mut ChaCha8Rng| vec![u(&[2, 4, 5], 0.2, 3.0)(r)];
    check_op("sqrt", &pos, &|g, v| Ok(g.sqrt(v[0])));
}

#[test]
fn reductions() {
    let one = |r: &mut ChaCha8Rng| vec![u(&[3, 4, 5], -2.0, 2.0)(r)];
    check_op("sum", &one, &|g, v| Ok(g.sum(v[0])));
    check_op("mean", &one, &|g, v| Ok(g.mean(v[0])));
    check_op("max", &one, &|g, v| g.max(v[0]));
    check_op("inf_norm", &one, &|g, v| g.inf_norm(v[0]));
    check_op("channel_mean", &one, &|g, v| g.channel_mean(v[0]));
    check_op("channel_affine", &one, &|g, v| g.channel_affine(v[0], vec![0.5, -2.0, 3.0], vec![0.1, 0.0, -1.0]));
    let mask = Tensor::from_fn(&[1, 4, 5], |i| (i % 3 == 0) as u8 as f64);
    check_op("channel_masked_sum", &one, &|g, v| g.channel_masked_sum(v[0], &mask));
}

#[test]
fn spatial_ops() {
    let img = |r: &mut ChaCha8Rng| vec![u(&[2, 7, 9], -1.0, 1.0)(r)];
    for (kh, kw) in [(1, 1), (2, 3), (4, 4), (7, 9)] {
        check_op("avg_pool", &img, &move |g, v| g.avg_pool(v[0], kh, kw));
    }
    for (h, w) in [(3, 4), (7, 9), (12, 20), (5, 17)] {
        check_op("resize", &img, &move |g, v| g.resize(v[0], h, w));
    }
    let conv =
        |r: &mut ChaCha8Rng| vec![u(&[2, 6, 7], -1.0, 1.0)(r), u(&[3, 2, 3, 3], -0.5, 0.5)(r), u(&[3], -0.2, 0.2)(r)];
    for dilation in [1, 2, 4] {
        check_op("conv2d", &conv, &move |g, v| g.conv2d(v[0], v[1], v[2], dilation));
    }
    let paste = |r: &mut ChaCha8Rng| vec![u(&[3, 8, 9], 0.0, 1.0)(r), u(&[3, 3, 4], 0.0, 1.0)(r)];
    check_op("paste", &paste, &|g, v| g.paste(v[0], v[1], 2, 5));
}

#[test]
fn losses() {
    let labels: Vec<usize> = (0..20).map(|i| (i * 7) % 4).collect();
    let logits = |r: &mut ChaCha8Rng| vec![u(&[4, 4, 5], -3.0, 3.0)(r)];
    check_op("cross_entropy", &logits, &|g, v| g.cross_entropy(v[0], &labels));
    let target = Tensor::from_fn(&[1, 4, 5], |i| ((i * 3) % 5) as f64 / 4.0);
    let pred = |r: &mut ChaCha8Rng| vec![u(&[1, 4, 5], 0.05, 0.95)(r)];
    check_op("bce", &pred, &|g, v| g.bce(v[0], &target));
    let patch = |r: &mut ChaCha8Rng| vec![u(&[3, 4, 5], 0.0, 1.0)(r)];
    check_op("smoothness", &patch, &|g, v| g.smoothness(v[0]));
    let palette = [[0.1, 0.2, 0.9], [0.8, 0.8, 0.1], [0.5, 0.05, 0.4]];
    check_op("non_printability", &patch, &|g, v| g.non_printability(v[0], &palette));
}

/// `f32` analytic directional derivative against an `f64` central
/// difference, moving every input along its direction at once.
fn check_chain(
    name: &str,
    point: u64,
    xs: &[Tensor<f64>],
    dirs: &[Tensor<f64>],
    build32: &dyn Fn(&mut Graph<f32>, &[Var]) -> zmask::Result<Var>,
    build64: &dyn Fn(&mut Graph<f64>, &[Var]) -> zmask::Result<Var>,
    h: f64,
) {
    let mut g = Graph::<f32>::new();
    let leaves: Vec<Var> = xs.iter().map(|x| g.leaf(x.cast())).collect();
    let out = build32(&mut g, &leaves).unwrap();
    let grads = g.backward(out).unwrap();
    let analytic: f64 = leaves
        .iter()
        .zip(xs.iter().zip(dirs))
        .map(|(&v, (x, d))| {
            let gr = grads.get_or_zeros(v, x.shape()).cast::<f64>();
            gr.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum();
    let eval = |s: f64| {
        let mut g = Graph::<f64>::new();
        let leaves: Vec<Var> =
            xs.iter().zip(dirs).map(|(x, d)| g.leaf(x.zip_map(d, |a, b| a + s * b).unwrap())).collect();
        let out = build64(&mut g, &leaves).unwrap();
        g.scalar(out)
    };
    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
    let e = rel_err(analytic, numeric, 1e-6);
    assert!(e < CHAIN_TOL, "{name} point {point}: analytic {analytic} numeric {numeric} rel {e}");
}

fn patch_task_loss<T: Real>(
    g: &mut Graph<T>,
    patch: Var,
    net: &ToySegNet,
    scene: &SyntheticScene,
    t: &TransformSpec,
) -> zmask::Result<Var> {
    let image = g.constant(scene.image.tensor().cast());
    let x = apply_patch_var(g, image, patch, t)?;
    let nv = net.forward_var(g, x, false)?;
    loss_task_untargeted_var(g, nv.logits, &scene.labels)
}

#[test]
fn patch_through_network_to_task_loss() {
    let net = ToySegNet::golden().unwrap();
    for point in 0..CHAIN_POINTS {
        let mut r = common::rng(100 + point);
        let scene = generate_scene(500 + point);
        let t = sample_transform(point, &Default::default(), (12, 24), (scene.height(), scene.width())).unwrap();
        let patch: Tensor<f64> = common::uniform(&mut r, &[3, 12, 24], 0.1, 0.9);
        let dir: Tensor<f64> = common::uniform(&mut r, &[3, 12, 24], -1.0, 1.0);
        check_chain(
            "patch->net->task",
            point,
            &[patch],
            &[dir],
            &|g, v| patch_task_loss(g, v[0], &net, &scene, &t),
            &|g, v| patch_task_loss(g, v[0], &net, &scene, &t),
            1e-5,
        );
    }
}

fn small_layers() -> (Vec<SynthLayer>, LayerSetConfig) {
    let layers = vec![
        SynthLayer::new("A", 4, 24, 48),
        SynthLayer::new("B", 6, 24, 48),
        SynthLayer::new("C", 5, 12, 24),
        SynthLayer::new("D", 3, 12, 24),
    ];
    let cfg = LayerSetConfig {
        shallow_layers: vec!["A".into(), "B".into()],
        deep_layers: vec!["C".into(), "D".into()],
        shallow_cascade: PoolCascadeSpec::new(vec![(6, 12), (3, 6), (2, 3)], (12, 24)).unwrap(),
        deep_cascade: PoolCascadeSpec::new(vec![(6, 12), (3, 6)], (12, 24)).unwrap(),
        std_eps: 1e-6,
    };
    (layers, cfg)
}

fn random_params(r: &mut ChaCha8Rng) -> FusionParams {
    let mut st = || {
        SoftThresholdParams::new(
            r.random_range(0.5..2.0),
            r.random_range(-1.0..0.5),
            r.random_range(1.0..4.0),
            r.random_range(-2.0..0.0),
        )
    };
    FusionParams { block_roi: st(), block_mask: st(), lambda0: 0.0 }
}

fn score_of<T: Real>(
    g: &mut Graph<T>,
    acts: &[Var],
    names: &[String],
    profile: &CalibrationProfile,
    cfg: &LayerSetConfig,
    fusion: &[Var],
) -> zmask::Result<Var> {
    let map: BTreeMap<String, Var> = names.iter().cloned().zip(acts.iter().copied()).collect();
    let (hs, hd) = shallow_deep_vars(g, &map, profile, cfg)?;
    let [a, b, c, d, e, f, gg, h] = fusion else { panic!("eight fusion scalars") };
    let fv = FusionVars {
        block_roi: SoftThresholdVars { w1: *a, b1: *b, w2: *c, b2: *d },
        block_mask: SoftThresholdVars { w1: *e, b1: *f, w2: *gg, b2: *h },
    };
    let m = fusion_var(g, hs, hd, &fv)?;
    score_var(g, hs, hd, m)
}

#[test]
fn trace_through_heatmaps_and_fusion_to_score() {
    let (layers, cfg) = small_layers();
    let profile = synth_profile(&layers);
    let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
    for point in 0..CHAIN_POINTS {
        let mut r = common::rng(300 + point);
        let spec = SynthSpec {
            layers: layers.clone(),
            background_std: 1.0,
            blob_region: (0.2, 0.3, 0.6, 0.7),
            blob_gain: 4.0,
            blob_layers: None,
            seed: point,
        };
        let trace = synth_trace(&spec, &profile).unwrap();
        let p = random_params(&mut r);
        let mut xs: Vec<Tensor<f64>> = names.iter().map(|n| trace.get(n).unwrap().cast()).collect();
        xs.extend(p.to_array().iter().map(|&v| Tensor::scalar(v)));
        let dirs: Vec<Tensor<f64>> = xs.iter().map(|x| common::uniform(&mut r, x.shape(), -1.0, 1.0)).collect();
        let n = names.len();
        check_chain(
            "trace->heatmaps->fusion->score",
            point,
            &xs,
            &dirs,
            &|g, v| score_of(g, &v[..n], &names, &profile, &cfg, &v[n..]),
            &|g, v| score_of(g, &v[..n], &names, &profile, &cfg, &v[n..]),
            1e-6,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn patch_score<T: Real>(
    g: &mut Graph<T>,
    patch: Var,
    net: &ToySegNet,
    scene: &SyntheticScene,
    t: &TransformSpec,
    profile: &CalibrationProfile,
    cfg: &LayerSetConfig,
    p: &FusionParams,
) -> zmask::Result<Var> {
    let image = g.constant(scene.image.tensor().cast());
    let x = apply_patch_var(g, image, patch, t)?;
    let nv = net.forward_var(g, x, false)?;
    let (hs, hd) = shallow_deep_vars(g, &nv.activations, profile, cfg)?;
    let fv = FusionVars::place(g, p, false);
    let m = fusion_var(g, hs, hd, &fv)?;
    score_var(g, hs, hd, m)
}

#[test]
fn patch_through_network_to_score() {
    let net = ToySegNet::golden().unwrap();
    let scenes = zmask::toy::corpus(0, 8);
    let profile = zmask::lab::calibrate(&net, &scenes, "grad-check").unwrap();
    let cfg = LayerSetConfig::toy();
    let p = FusionParams { block_roi: SoftThresholdParams::new(1.5, -0.5, 3.0, -1.0), ..FusionParams::default() };
    for point in 0..CHAIN_POINTS {
        let mut r = common::rng(700 + point);
        let scene = generate_scene(900 + point);
        let t = sample_transform(point, &Default::default(), (24, 48), (scene.height(), scene.width())).unwrap();
        let patch: Tensor<f64> = common::uniform(&mut r, &[3, 24, 48], 0.1, 0.9);
        let dir: Tensor<f64> = common::uniform(&mut r, &[3, 24, 48], -1.0, 1.0);
        check_chain(
            "patch->net->heatmaps->score",
            point,
            &[patch],
            &[dir],
            &|g, v| patch_score(g, v[0], &net, &scene, &t, &profile, &cfg, &p),
            &|g, v| patch_score(g, v[0], &net, &scene, &t, &profile, &cfg, &p),
            1e-5,
        );
    }
}
