//! Synthetic corpus: coloured geometric shapes on textured backgrounds.

use rayon::prelude::*;

use super::{Instance, SegmentedImage};
use crate::error::{Error, Result};
use crate::grounding::Mask;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 8] = ["disk", "square", "triangle", "ring", "cross", "bar", "diamond", "ell"];

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.85],
    [0.98, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub num_classes: usize,
    pub n_images: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Zipf exponent of the class distribution; 0 is uniform.
    pub zipf: f64,
    /// Radius range of the first (dominant) object.
    pub large_radius: (f64, f64),
    /// Radius range of every other object.
    pub small_radius: (f64, f64),
    /// Per-channel colour jitter around the class tint.
    pub color_jitter: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            num_classes: 8,
            n_images: 2500,
            image_size: 32,
            min_objects: 2,
            max_objects: 5,
            zipf: 0.5,
            large_radius: (7.0, 10.0),
            small_radius: (3.5, 6.0),
            color_jitter: 0.08,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.num_classes > SHAPE_NAMES.len() {
            return bad(format!("num_classes must be in 2..={}", SHAPE_NAMES.len()));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return bad(format!("zipf exponent {} must be finite and ≥ 0", self.zipf));
        }
        if self.n_images == 0 {
            return bad("n_images must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("bad object range {}..={}", self.min_objects, self.max_objects));
        }
        for (lo, hi) in [self.large_radius, self.small_radius] {
            if !(lo > 1.0 && lo <= hi && 2.0 * hi < self.image_size as f64) {
                return bad(format!("radius range {lo}..{hi} does not fit a {}px image", self.image_size));
            }
        }
        if !(0.0..0.5).contains(&self.color_jitter) {
            return bad(format!("color_jitter {} outside [0, 0.5)", self.color_jitter));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }
}

/// Zipf weights `(k+1)^−z`, normalised.
pub fn class_weights(k: usize, z: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|j| ((j + 1) as f64).powf(-z)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Whether offset `(dx, dy)` from the centre lies inside shape `class` of
/// radius `s`.
pub fn shape_contains(class: usize, dx: f64, dy: f64, s: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match class {
        0 => dx * dx + dy * dy <= s * s,
        1 => ax.max(ay) <= 0.8 * s,
        2 => dy.abs() <= 0.9 * s && ax <= 0.55 * (dy + 0.9 * s),
        3 => {
            let r2 = dx * dx + dy * dy;
            r2 <= s * s && r2 >= 0.25 * s * s
        }
        4 => (ax <= 0.3 * s && ay <= s) || (ay <= 0.3 * s && ax <= s),
        5 => ax <= s && ay <= 0.35 * s,
        6 => ax + ay <= s,
        _ => ay <= s && ax <= s && (dx <= -0.3 * s || dy >= 0.3 * s),
    }
}

fn background(size: usize, rng: &mut RngStream) -> Vec<[f64; 3]> {
    let base = rng.uniform_range(0.25, 0.55);
    let tint = [rng.uniform_range(-0.05, 0.05), rng.uniform_range(-0.05, 0.05), rng.uniform_range(-0.05, 0.05)];
    let freq = rng.uniform_range(0.2, 0.9);
    let angle = rng.uniform_range(0.0, std::f64::consts::PI);
    let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    let (c, s) = (angle.cos(), angle.sin());
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let stripe = 0.05 * (freq * (c * x + s * y) + phase).sin();
            let noise = rng.uniform_range(-0.06, 0.06);
            let v = base + stripe + noise;
            [v + tint[0], v + tint[1], v + tint[2]]
        })
        .collect()
}

/// Renders image `index`. Each image draws from its own stream split off
/// `rng`, so images can be produced in any order.
pub fn generate_image(cfg: &GenerateConfig, rng: &RngStream, index: usize) -> SegmentedImage {
    let id = format!("img{index:05}");
    let mut r = rng.split(&id);
    let n = cfg.image_size;
    let weights = class_weights(cfg.num_classes, cfg.zipf);
    let mut px = background(n, &mut r);
    let mut blocked = vec![false; n * n];
    let mut instances = Vec::new();
    let n_obj = cfg.min_objects + r.below(cfg.max_objects - cfg.min_objects + 1);
    for k in 0..n_obj {
        let class = r.categorical(&weights);
        let (lo, hi) = if k == 0 { cfg.large_radius } else { cfg.small_radius };
        let s = r.uniform_range(lo, hi);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cx = r.uniform_range(s, n as f64 - s);
            let cy = r.uniform_range(s, n as f64 - s);
            let mask = Mask::from_fn(n, n, |y, x| shape_contains(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s));
            if mask.count() > 0 && !mask.bits().iter().zip(&blocked).any(|(m, b)| *m && *b) {
                placed = Some(mask);
                break;
            }
        }
        let Some(mask) = placed else {
            log::debug!("{id}: skipped a {} after {PLACEMENT_ATTEMPTS} placement attempts", SHAPE_NAMES[class]);
            continue;
        };
        let color: Vec<f64> = PALETTE[class]
            .iter()
            .map(|c| c + r.uniform_range(-cfg.color_jitter, cfg.color_jitter))
            .collect();
        for y in 0..n {
            for x in 0..n {
                if !mask.get(y, x) {
                    continue;
                }
                let shade = r.uniform_range(-0.03, 0.03);
                for ch in 0..3 {
                    px[y * n + x][ch] = color[ch] + shade;
                }
                // Keep a one-pixel gap around every placed object.
                for yy in y.saturating_sub(1)..(y + 2).min(n) {
                    for xx in x.saturating_sub(1)..(x + 2).min(n) {
                        blocked[yy * n + xx] = true;
                    }
                }
            }
        }
        instances.push(Instance { mask, class_id: class });
    }
    let data: Vec<f64> = px
        .iter()
        .flat_map(|p| p.iter().map(|v| quantize(*v) as f64 / 255.0))
        .collect();
    let pixels = Tensor::from_parts(vec![n, n, 3], data);
    SegmentedImage::new(id, pixels, instances).expect("generator emits valid images")
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Generates every image in memory, in parallel, in index order.
pub fn generate_samples(cfg: &GenerateConfig, rng: &RngStream) -> Result<Vec<SegmentedImage>> {
    cfg.validate()?;
    Ok((0..cfg.n_images).into_par_iter().map(|i| generate_image(cfg, rng, i)).collect())
}
