//! Training-time augmentations; geometry is shared between image and label.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Independent probability of each transform.
    pub probability: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub gamma_range: (f64, f64),
    pub max_noise_sigma: f64,
    pub smooth_sigma_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            max_rotation_deg: 15.0,
            scale_range: (0.9, 1.1),
            gamma_range: (0.8, 1.2),
            max_noise_sigma: 0.05,
            smooth_sigma_range: (0.5, 1.0),
        }
    }
}

pub fn hflip(s: &Sample) -> Sample {
    let mut out = s.clone();
    for y in 0..s.height {
        for x in 0..s.width {
            let src = y * s.width + (s.width - 1 - x);
            out.image[y * s.width + x] = s.image[src];
            out.label[y * s.width + x] = s.label[src];
        }
    }
    out
}

/// Rotation by `degrees` and isotropic scaling by `scale` about the canvas
/// centre. Image bilinear, label nearest; outside the source is 0.
pub fn warp(s: &Sample, degrees: f64, scale: f64) -> Sample {
    let (h, w) = (s.height, s.width);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let t = degrees.to_radians();
    let (cos, sin) = (t.cos(), t.sin());
    let mut out = s.clone();
    let pixel = |yy: isize, xx: isize| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            s.image[yy as usize * w + xx as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // inverse map: rotate by -t, divide by scale
            let sx = (cos * dx + sin * dy) / scale + cx - 0.5;
            let sy = (-sin * dx + cos * dy) / scale + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out.image[y * w + x] = (1.0 - fy) * ((1.0 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1))
                + fy * ((1.0 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
            let (nx, ny) = (sx.round() as isize, sy.round() as isize);
            out.label[y * w + x] = if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                0
            } else {
                s.label[ny as usize * w + nx as usize]
            };
        }
    }
    out
}

pub fn gamma(s: &Sample, g: f64) -> Sample {
    let mut out = s.clone();
    for v in out.image.iter_mut() {
        *v = v.max(0.0).powf(g as f32);
    }
    out
}

pub fn add_noise<R: Rng + ?Sized>(s: &Sample, sigma: f64, rng: &mut R) -> Sample {
    let mut out = s.clone();
    if sigma <= 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in out.image.iter_mut() {
        *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
    }
    out
}

/// Separable Gaussian blur with edge clamping, image only.
pub fn smooth(s: &Sample, sigma: f64) -> Sample {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = weights.iter().sum();
    let (h, w) = (s.height as isize, s.width as isize);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in weights.iter().enumerate() {
                    let o = k as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y, (x + o).clamp(0, w - 1))
                    } else {
                        ((y + o).clamp(0, h - 1), x)
                    };
                    acc += wt * src[(yy * w + xx) as usize];
                }
                dst[(y * w + x) as usize] = acc / total;
            }
        }
        dst
    };
    let mut out = s.clone();
    out.image = pass(&pass(&s.image, true), false);
    out
}

/// Applies each transform independently with `cfg.probability`.
pub fn augment_with<R: Rng + ?Sized>(s: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    let hit = |rng: &mut R| cfg.probability > 0.0 && rng.random::<f64>() < cfg.probability;
    let mut out = s.clone();
    if hit(rng) {
        out = hflip(&out);
    }
    let rotation = if hit(rng) {
        rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let scale = if hit(rng) {
        rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        1.0
    };
    if rotation != 0.0 || scale != 1.0 {
        out = warp(&out, rotation, scale);
    }
    if hit(rng) {
        out = gamma(&out, rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1));
    }
    if hit(rng) {
        let sigma = rng.random_range(0.0..=cfg.max_noise_sigma);
        out = add_noise(&out, sigma, rng);
    }
    if hit(rng) {
        out = smooth(
            &out,
            rng.random_range(cfg.smooth_sigma_range.0..=cfg.smooth_sigma_range.1),
        );
    }
    out
}

/// Default augmentation policy: every transform with probability 0.5.
pub fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R) -> Sample {
    augment_with(s, rng, &AugmentConfig::default())
}
