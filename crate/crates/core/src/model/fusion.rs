//! Merges projected auxiliary features into every pyramid level.

use serde::{Deserialize, Serialize};

use super::hiera::FeaturePyramid;
use super::init::Init;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Concat,
    #[default]
    Interleave,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "concat" => Ok(Self::Concat),
            "interleave" => Ok(Self::Interleave),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (none|concat|interleave)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Channels per interleaved slice.
    pub group: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Interleave,
            group: 1,
        }
    }
}

impl FusionConfig {
    /// Channel width of every fused level.
    pub fn output_channels(&self, d_hiera: usize) -> usize {
        match self.mode {
            FusionMode::None => d_hiera,
            FusionMode::Concat | FusionMode::Interleave => 2 * d_hiera,
        }
    }
}

pub(crate) fn init_fusion<T: Scalar>(init: &mut Init<'_, T>, d_dino: usize, d_hiera: usize) {
    init.fan_in("fusion.proj.weight", &[d_dino, d_hiera], d_dino, true);
    init.zeros("fusion.proj.bias", &[d_hiera], true);
}

/// Per-position affine map `F·W_proj + b_proj` from `d_dino` to `d_hiera`
/// channels.
pub fn project_aux<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
    let w = tape.param(store, "fusion.proj.weight")?;
    let b = tape.param(store, "fusion.proj.bias")?;
    let d_in = tape.value(features).last_dim();
    if tape.shape(w)[0] != d_in {
        return Err(Error::shape(
            "project_aux",
            format!("features have {d_in} channels, projection expects {}", tape.shape(w)[0]),
        ));
    }
    tape.linear(features, w, b.into())
}

/// Projects the auxiliary grid once, resizes it to every level and merges it
/// according to `cfg.mode`. Spatial extents of every level are preserved.
pub fn fuse_pyramid<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &FusionConfig,
    pyramid: &FeaturePyramid,
    aux: Option<Var>,
) -> Result<FeaturePyramid> {
    if cfg.mode == FusionMode::None {
        return Ok(pyramid.clone());
    }
    let aux = aux.ok_or_else(|| Error::Config("fusion mode requires auxiliary features".into()))?;
    let projected = project_aux(tape, store, aux)?;
    let mut levels = Vec::with_capacity(pyramid.len());
    for &level in &pyramid.levels {
        let (h, w) = {
            let s = tape.shape(level);
            (s[1], s[2])
        };
        let aligned = tape.bilinear_resize(projected, h, w)?;
        let fused = match cfg.mode {
            FusionMode::Concat => tape.concat(&[level, aligned])?,
            FusionMode::Interleave => tape.interleave(level, aligned, cfg.group)?,
            FusionMode::None => unreachable!(),
        };
        levels.push(fused);
    }
    Ok(FeaturePyramid {
        levels,
        strides: pyramid.strides.clone(),
    })
}
