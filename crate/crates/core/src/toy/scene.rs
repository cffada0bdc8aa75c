//! Procedural street-like scenes with aligned per-pixel labels.
//!
//! Classes: 0 sky, 1 road, 2 vegetation, 3 objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Image, Tensor};
use crate::toy::net::{INPUT_DIMS, N_CLASSES};

pub const SKY: usize = 0;
pub const ROAD: usize = 1;
pub const VEGETATION: usize = 2;
pub const OBJECT: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    /// Row-major class ids, `height * width` entries.
    pub labels: Vec<usize>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

pub fn generate_scene(seed: u64) -> SyntheticScene {
    generate_scene_with(seed, INPUT_DIMS.0, INPUT_DIMS.1)
}

pub fn generate_scene_with(seed: u64, h: usize, w: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f32, w as f32);
    let mut rgb = vec![[0f32; 3]; h * w];
    let mut labels = vec![SKY; h * w];

    // Horizon with a slight tilt; sky gradient above, textured road below.
    let horizon = hf * rng.random_range(0.3..0.55);
    let tilt = rng.random_range(-0.08..0.08) * hf / wf;
    let sky_top = [rng.random_range(0.25..0.45), rng.random_range(0.45..0.6), rng.random_range(0.8..0.95)];
    let sky_low = [0.75, 0.82, 0.95];
    let road_tone: f32 = rng.random_range(0.3..0.5);
    let lane_col = wf * rng.random_range(0.35..0.65);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let hz = horizon + tilt * (x as f32 - wf / 2.0);
            if (y as f32) < hz {
                let t = (y as f32 / hz.max(1.0)).clamp(0.0, 1.0);
                for c in 0..3 {
                    rgb[p][c] = sky_top[c] * (1.0 - t) + sky_low[c] * t;
                }
            } else {
                let grain = rng.random_range(-0.06..0.06);
                let depth = (y as f32 - hz) / (hf - hz).max(1.0);
                let lane_half = 0.5 + 2.0 * depth;
                let lane = (x as f32 - lane_col - (depth - 0.5) * 20.0).abs() < lane_half && (y / 6) % 2 == 0;
                let v = if lane { 0.92 } else { road_tone + grain };
                rgb[p] = [v, v, v * 1.02];
                labels[p] = ROAD;
            }
        }
    }

    // Vegetation: textured ellipses straddling the horizon.
    let n_veg = rng.random_range(1..=3);
    for _ in 0..n_veg {
        let cy = horizon + rng.random_range(-0.15..0.05) * hf;
        let cx = rng.random_range(0.0..wf);
        let (ry, rx) = (hf * rng.random_range(0.1..0.22), wf * rng.random_range(0.08..0.2));
        let shade: f32 = rng.random_range(0.35..0.6);
        let freq: f32 = rng.random_range(0.6..1.2);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    let p = y * w + x;
                    let tex = 0.08 * ((x as f32 * freq).sin() * (y as f32 * freq * 1.3).cos());
                    rgb[p] = [0.12 + tex, shade + tex, 0.1 + tex * 0.5];
                    labels[p] = VEGETATION;
                }
            }
        }
    }

    // Objects: saturated boxes with a dark rim, standing on the road.
    let n_obj = rng.random_range(1..=3);
    for _ in 0..n_obj {
        let bh = (hf * rng.random_range(0.12..0.3)) as usize;
        let bw = (wf * rng.random_range(0.06..0.16)) as usize;
        let bottom = (rng.random_range(horizon + 0.1 * hf..hf) as usize).clamp(bh.max(1), h);
        let left = rng.random_range(0..w.saturating_sub(bw).max(1));
        let palette = [[0.85, 0.15, 0.12], [0.9, 0.8, 0.1], [0.55, 0.2, 0.7], [0.1, 0.3, 0.85]];
        let base = palette[rng.random_range(0..palette.len())];
        for y in bottom - bh..bottom {
            for x in left..(left + bw).min(w) {
                let p = y * w + x;
                let rim = y < bottom - bh + 2 || y + 2 >= bottom || x < left + 2 || x + 3 > left + bw;
                rgb[p] = if rim { [base[0] * 0.4, base[1] * 0.4, base[2] * 0.4] } else { base };
                labels[p] = OBJECT;
            }
        }
    }

    let mut data = vec![0f32; 3 * h * w];
    for (p, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c].clamp(0.0, 1.0);
        }
    }
    debug_assert!(labels.iter().all(|&l| l < N_CLASSES));
    let image = Image::new(Tensor::new(vec![3, h, w], data).expect("sized")).expect("clamped");
    SyntheticScene { image, labels }
}

/// Scenes for seeds `start..start + n`.
pub fn corpus(start: u64, n: usize) -> Vec<SyntheticScene> {
    let seeds: Vec<u64> = (start..start + n as u64).collect();
    crate::par::map(&seeds, |&s| generate_scene(s))
}
