//! Speckled ellipse phantoms standing in for cardiac and thyroid scans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::Sample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Background, ventricle-like and atrium-like structures; both always present.
    #[default]
    Cardiac,
    /// Background and a gland-like structure that may be absent.
    Thyroid,
}

impl Regime {
    pub fn num_classes(self) -> usize {
        match self {
            Regime::Cardiac => 3,
            Regime::Thyroid => 2,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "cardiac" => Ok(Regime::Cardiac),
            "thyroid" => Ok(Regime::Thyroid),
            other => Err(crate::Error::Config(format!(
                "unknown regime {other:?} (cardiac|thyroid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub count: usize,
    /// Height and width in pixels.
    pub size: usize,
    pub regime: Regime,
    /// Thyroid regime: probability that a sample has no foreground.
    pub empty_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 64,
            size: 224,
            regime: Regime::Cardiac,
            empty_fraction: 0.2,
        }
    }
}

const BACKGROUND_MEAN: f32 = 0.25;
const STRUCTURE_MEAN: [f32; 2] = [0.55, 0.75];
/// Mean of the squared average of two unit exponentials.
const SPECKLE_MEAN: f64 = 1.5;
/// Depth of the darkening towards a structure's centre.
const CHAMBER_DARKENING: f32 = 0.3;
/// Axis range at 224 px; scaled with the canvas.
const AXIS_RANGE: (f64, f64) = (15.0, 50.0);

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        let scale = s / 224.0;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cx: rng.random_range(0.2 * s..0.8 * s),
            cy: rng.random_range(0.2 * s..0.8 * s),
            a: rng.random_range(AXIS_RANGE.0 * scale..AXIS_RANGE.1 * scale),
            b: rng.random_range(AXIS_RANGE.0 * scale..AXIS_RANGE.1 * scale),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Normalized radius of a pixel centre; `<= 1` inside.
    fn radius(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Intensity factor at normalized radius `r`: darker at the centre, brighter
/// at the rim, with unit mean over the ellipse area (the area mean of `r²` is
/// 1/2), so each structure keeps its nominal mean intensity.
fn chamber_profile(r: f32) -> f32 {
    1.0 + CHAMBER_DARKENING * (2.0 * r * r - 1.0)
}

/// Stream seed of sample `index`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn paint(label: &mut [u8], radius: &mut [f32], e: &Ellipse, class: u8, size: usize) {
    for y in 0..size {
        for x in 0..size {
            let r = e.radius(x, y);
            if r <= 1.0 {
                label[y * size + x] = class;
                radius[y * size + x] = r as f32;
            }
        }
    }
}

fn box_blur3(img: &[f32], size: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            let (mut s, mut n) = (0.0f32, 0.0f32);
            for yy in y.saturating_sub(1)..=(y + 1).min(size - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(size - 1) {
                    s += img[yy * size + xx];
                    n += 1.0;
                }
            }
            out[y * size + x] = s / n;
        }
    }
    out
}

fn generate_one(spec: &PhantomSpec, index: usize) -> Sample {
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let n = size * size;
    let min_pixels = ((n as f64) * 0.002).ceil() as usize;
    let (label, radius) = loop {
        let mut label = vec![0u8; n];
        let mut radius = vec![1.0f32; n];
        match spec.regime {
            Regime::Cardiac => {
                // atrium first so the ventricle overlays it
                let atrium = Ellipse::random(&mut rng, size);
                let ventricle = Ellipse::random(&mut rng, size);
                paint(&mut label, &mut radius, &atrium, 2, size);
                paint(&mut label, &mut radius, &ventricle, 1, size);
                let c1 = label.iter().filter(|&&l| l == 1).count();
                let c2 = label.iter().filter(|&&l| l == 2).count();
                if c1 >= min_pixels && c2 >= min_pixels {
                    break (label, radius);
                }
            }
            Regime::Thyroid => {
                if rng.random::<f64>() < spec.empty_fraction {
                    break (label, radius);
                }
                let lobes = rng.random_range(1..=2);
                for _ in 0..lobes {
                    let e = Ellipse::random(&mut rng, size);
                    paint(&mut label, &mut radius, &e, 1, size);
                }
                break (label, radius);
            }
        }
    };

    let mut image = vec![0.0f32; n];
    for i in 0..n {
        let base = match label[i] {
            0 => BACKGROUND_MEAN,
            c => STRUCTURE_MEAN[c as usize - 1] * chamber_profile(radius[i]),
        };
        let e1: f64 = Exp1.sample(&mut rng);
        let e2: f64 = Exp1.sample(&mut rng);
        let speckle = ((e1 + e2) / 2.0).powi(2) / SPECKLE_MEAN;
        image[i] = base * speckle as f32;
    }
    let image = box_blur3(&image, size).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Sample {
        id: format!("{:?}_{index:05}", spec.regime).to_lowercase(),
        height: size,
        width: size,
        image,
        label,
    }
}

/// Generates `spec.count` samples; sample `i` depends only on `(spec, i)`.
pub fn generate(spec: &PhantomSpec) -> Vec<Sample> {
    (0..spec.count).map(|i| generate_one(spec, i)).collect()
}
