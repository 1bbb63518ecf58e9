//! Named parameters with per-tensor trainable flags.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    /// Populated by [`ParamStore::absorb_grads`]; stays `None` for frozen tensors.
    pub grad: Option<Tensor<T>>,
}

/// Ordered name → parameter map. Iteration order is lexicographic, which keeps
/// optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.params.insert(
            name.into(),
            Parameter {
                value,
                trainable,
                grad: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total element count, trainable only when `trainable_only`.
    pub fn count_elements(&self, trainable_only: bool) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Copies gradients produced by a backward pass onto the trainable
    /// parameters they belong to.
    pub fn absorb_grads(&mut self, grads: Vec<(String, Tensor<T>)>) {
        for (name, g) in grads {
            if let Some(p) = self.params.get_mut(&name) {
                if p.trainable {
                    p.grad = Some(g);
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            trainable: p.trainable,
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl ParamStore<f32> {
    /// Writes every tensor to `<dir>/<name>.bin`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, p) in &self.params {
            let f = fs::File::create(dir.join(format!("{name}.bin")))?;
            p.value.write_to(name, BufWriter::new(f))?;
        }
        Ok(())
    }

    /// Replaces values of matching parameters with those found in `dir`.
    /// Every parameter of `self` must be present with the same shape; the
    /// trainable flags of `self` are kept.
    pub fn load_values(&mut self, dir: &Path) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let path = dir.join(format!("{name}.bin"));
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let (stored, value) = Tensor::read_from(BufReader::new(fs::File::open(&path)?))?;
            if stored != *name {
                return Err(Error::Data(format!("{} holds tensor {stored}", path.display())));
            }
            if value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name}: expected {:?}, found {:?}", p.value.shape(), value.shape()),
                ));
            }
            p.value = value;
        }
        Ok(())
    }
}
