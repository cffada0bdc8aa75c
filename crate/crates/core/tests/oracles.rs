//! Loss functions and AUC against independent brute-force oracles.

mod common;

use rand::Rng;
use zmask::attacks::{loss_nps, loss_oz, loss_smooth};
use zmask::calibration::{CalibrationProfile, ChannelStats};
use zmask::learn::{bce_loss, roc_and_cutoff};
use zmask::tensor::Tensor;
use zmask::trace::ActivationTrace;

const INSTANCES: u64 = 20;
const REL_TOL: f64 = 1e-6;

fn assert_close(name: &str, i: u64, got: f64, want: f64) {
    let rel = (got - want).abs() / want.abs().max(1e-12);
    assert!(rel < REL_TOL, "{name} instance {i}: got {got}, oracle {want}, rel {rel}");
}

fn at(t: &Tensor, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[(c * s[1] + y) * s[2] + x] as f64
}

#[test]
fn smoothness_matches_neighbour_pair_enumeration() {
    for i in 0..INSTANCES {
        let mut r = common::rng(i);
        let (h, w) = (r.random_range(1..9usize), r.random_range(1..9usize));
        let p: Tensor = common::uniform(&mut r, &[3, h, w], 0.0, 1.0);
        let mut want = 0.0;
        for c in 0..3 {
            for a in 0..h * w {
                for b in a + 1..h * w {
                    let (ya, xa, yb, xb) = (a / w, a % w, b / w, b % w);
                    if ya.abs_diff(yb) + xa.abs_diff(xb) == 1 {
                        want += (at(&p, c, ya, xa) - at(&p, c, yb, xb)).powi(2);
                    }
                }
            }
        }
        if want == 0.0 {
            assert_eq!(loss_smooth(&p).unwrap(), 0.0);
        } else {
            assert_close("smooth", i, loss_smooth(&p).unwrap(), want);
        }
    }
}

#[test]
fn nps_matches_log_domain_product() {
    for i in 0..INSTANCES {
        let mut r = common::rng(100 + i);
        let (h, w) = (r.random_range(1..6usize), r.random_range(1..6usize));
        let p: Tensor = common::uniform(&mut r, &[3, h, w], 0.0, 1.0);
        let palette: Vec<[f32; 3]> = (0..r.random_range(1..10)).map(|_| [r.random(), r.random(), r.random()]).collect();
        let mut want = 0.0;
        for y in 0..h {
            for x in 0..w {
                let log_sum: f64 = palette
                    .iter()
                    .map(|col| {
                        let d2: f64 = (0..3).map(|k| (at(&p, k, y, x) - col[k] as f64).powi(2)).sum();
                        0.5 * d2.ln()
                    })
                    .sum();
                want += log_sum.exp();
            }
        }
        want /= (h * w) as f64;
        assert_close("nps", i, loss_nps(&p, &palette).unwrap(), want);
    }
}

#[test]
fn overactivation_loss_matches_direct_sum() {
    for i in 0..INSTANCES {
        let mut r = common::rng(200 + i);
        let (h, w) = (r.random_range(2..10usize), r.random_range(2..10usize));
        let n_layers = r.random_range(1..4usize);
        let mut trace = ActivationTrace::new();
        let mut profile = CalibrationProfile::new("m", "d");
        let mut names = Vec::new();
        for l in 0..n_layers {
            let c = r.random_range(1..5usize);
            let name = format!("layer{l}");
            let act: Tensor = common::uniform(&mut r, &[c, h, w], -3.0, 3.0);
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
            let std: Vec<f64> = (0..c).map(|_| r.random_range(0.1..2.0)).collect();
            profile.layers.insert(name.clone(), ChannelStats::from_moments(mean, std, 10).unwrap());
            trace.insert(name.clone(), act);
            names.push(name);
        }
        let (t0, l0) = (r.random_range(0..h), r.random_range(0..w));
        let (t1, l1) = (r.random_range(t0 + 1..=h), r.random_range(l0 + 1..=w));
        let footprint =
            Tensor::from_fn(&[1, h, w], |p| ((t0..t1).contains(&(p / w)) && (l0..l1).contains(&(p % w))) as u8 as f32);
        let area = ((t1 - t0) * (l1 - l0)) as f64;

        let mut want = 0.0;
        for name in &names {
            let act = trace.get(name).unwrap();
            let stats = profile.layer(name).unwrap();
            let c = act.shape()[0];
            let mut layer = 0.0;
            for ch in 0..c {
                let (mu, sd) = (stats.mean()[ch], stats.std()[ch].max(1e-6));
                let mut s = 0.0;
                for y in t0..t1 {
                    for x in l0..l1 {
                        s += (at(act, ch, y, x) - mu) / sd;
                    }
                }
                layer += s.abs();
            }
            want += layer / (c as f64 * area);
        }
        want /= n_layers as f64;
        assert_close("oz", i, loss_oz(&trace, &profile, &names, &footprint, 1e-6).unwrap(), want);
    }
}

#[test]
fn bce_matches_definition() {
    for i in 0..INSTANCES {
        let mut r = common::rng(300 + i);
        let n = r.random_range(1..50usize);
        let p: Tensor<f64> = common::uniform(&mut r, &[n], 0.01, 0.99);
        let t =
            Tensor::from_fn(
                &[n],
                |_| if r.random::<f64>() < 0.3 { r.random() } else { r.random::<bool>() as u8 as f64 },
            );
        let want = -p.data().iter().zip(t.data()).map(|(&p, &t)| t * p.ln() + (1.0 - t) * (1.0 - p).ln()).sum::<f64>()
            / n as f64;
        assert_close("bce", i, bce_loss(&p, &t).unwrap(), want);
    }
}

#[test]
fn auc_matches_pairwise_concordance() {
    for i in 0..INSTANCES {
        let mut r = common::rng(400 + i);
        let n = r.random_range(2..60usize);
        // quantized scores produce ties across classes
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0.0..1.0f64) * 8.0).floor() / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut credit, mut pairs) = (0.0, 0.0);
        for (a, &la) in labels.iter().enumerate() {
            for (b, &lb) in labels.iter().enumerate() {
                if la && !lb {
                    pairs += 1.0;
                    credit += match scores[a].partial_cmp(&scores[b]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        assert_close("auc", i, roc_and_cutoff(&scores, &labels).unwrap().0.auc, credit / pairs);
    }
}

#[test]
fn spec_auc_example() {
    let (roc, _) = roc_and_cutoff(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    assert!((roc.auc - 0.75).abs() < 1e-12);
    let (flat, _) = roc_and_cutoff(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
    assert!((flat.auc - 0.5).abs() < 1e-12);
    assert!(roc_and_cutoff(&[0.1, 0.2], &[true, true]).is_err());
}
