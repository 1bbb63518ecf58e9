use std::collections::BTreeMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are allocated for the trainable
/// parameters present at construction and for nothing else.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let z = Tensor::zeros(p.value.shape());
                (name.to_string(), (z.clone(), z))
            })
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            moments,
        }
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn moment(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// (unreached by the backward pass) are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(self.eps));
        let step_size = T::from_f64_lossy(lr / c1);
        let c2_sqrt = T::from_f64_lossy(c2.sqrt());
        for (name, (m, v)) in self.moments.iter_mut() {
            let p = store.get_mut(name)?;
            if !p.trainable {
                return Err(Error::Config(format!(
                    "parameter {name} was frozen after the optimizer was built"
                )));
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let w = p.value.data_mut();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *wi -= step_size * *mi / ((*vi).sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
