//! Dataset directories: `images/<id>.png`, `labels/<id>.png`, `manifest.json`.

use std::fs;
use std::path::Path;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_classes: usize,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == which)
            .map(|(s, _)| s)
            .collect()
    }
}

/// Seeded partition of `n` items by `(train, val)` fractions; the remainder is
/// test.
pub fn assign_splits(n: usize, train: f64, val: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train * n as f64).round() as usize;
    let n_val = ((val * n as f64).round() as usize).min(n - n_train.min(n));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn to_u8(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn save_label_png(path: &Path, label: &[u8], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, label.to_vec())
        .ok_or_else(|| Error::Data("label buffer does not match its size".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn save_dataset(dir: &Path, samples: &[Sample], splits: &[Split], num_classes: usize) -> Result<()> {
    if samples.len() != splits.len() {
        return Err(Error::Data("one split per sample required".into()));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (s, &split) in samples.iter().zip(splits) {
        s.validate_classes(num_classes)?;
        let image_rel = format!("images/{}.png", s.id);
        let label_rel = format!("labels/{}.png", s.id);
        let pixels = s.image.iter().map(|&v| to_u8(v)).collect();
        GrayImage::from_raw(s.width as u32, s.height as u32, pixels)
            .expect("sample invariants fix the buffer size")
            .save(dir.join(&image_rel))?;
        save_label_png(&dir.join(&label_rel), &s.label, s.height, s.width)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image: image_rel,
            label: label_rel,
            split,
        });
    }
    let manifest = Manifest {
        num_classes,
        samples: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::open(path)?.into_luma8())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut splits = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let img = read_gray(&dir.join(&e.image))?;
        let lbl = read_gray(&dir.join(&e.label))?;
        if img.dimensions() != lbl.dimensions() {
            return Err(Error::Data(format!(
                "sample {}: image is {:?} but label is {:?}",
                e.id,
                img.dimensions(),
                lbl.dimensions()
            )));
        }
        let (w, h) = img.dimensions();
        let image = img.into_raw().into_iter().map(|p| p as f32 / 255.0).collect();
        let s = Sample::new(e.id.clone(), h as usize, w as usize, image, lbl.into_raw())?;
        s.validate_classes(manifest.num_classes)?;
        samples.push(s);
        splits.push(e.split);
    }
    Ok(Dataset {
        num_classes: manifest.num_classes,
        samples,
        splits,
    })
}
