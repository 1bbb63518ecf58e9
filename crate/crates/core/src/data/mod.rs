//! Samples, synthetic phantoms, augmentation and dataset files.

pub mod augment;
pub mod io;
pub mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale image in `[0, 1]` with a per-pixel class map of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub label: Vec<u8>,
}

impl Sample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, image: Vec<f32>, label: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if image.len() != height * width || label.len() != height * width {
            return Err(Error::Data(format!(
                "sample {id}: image/label sizes {}/{} do not match {height}x{width}",
                image.len(),
                label.len()
            )));
        }
        Ok(Self {
            id,
            height,
            width,
            image,
            label,
        })
    }

    pub fn validate_classes(&self, classes: usize) -> Result<()> {
        match self.label.iter().find(|&&l| l as usize >= classes) {
            Some(&bad) => Err(Error::Data(format!(
                "sample {}: label {bad} out of range for {classes} classes",
                self.id
            ))),
            None => Ok(()),
        }
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.label.iter().filter(|&&l| l == class).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Stacks sample images into a `[b, H, W, 1]` tensor.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Data(format!(
                "sample {} is {}x{}, batch is {h}x{w}",
                s.id, s.height, s.width
            )));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::new(vec![samples.len(), h, w, 1], data)
}

/// Concatenated class indices of a batch, in the order of [`batch_images`].
pub fn batch_labels(samples: &[&Sample]) -> Vec<usize> {
    samples
        .iter()
        .flat_map(|s| s.label.iter().map(|&l| l as usize))
        .collect()
}
