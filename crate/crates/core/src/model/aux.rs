//! Frozen ViT-style auxiliary encoder producing one dense feature grid.

use serde::{Deserialize, Serialize};

use super::hiera::{hiera_block, init_block, LN_EPS};
use super::init::Init;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub d_dino: usize,
    pub heads: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            depth: 2,
            d_dino: 48,
            heads: 2,
        }
    }
}

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.d_dino == 0 {
            return Err(Error::Config("aux patch_size and d_dino must be positive".into()));
        }
        if self.heads == 0 || !self.d_dino.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "aux d_dino {} not divisible by {} heads",
                self.d_dino, self.heads
            )));
        }
        Ok(())
    }
}

pub(crate) fn init_aux<T: Scalar>(init: &mut Init<'_, T>, cfg: &AuxConfig) -> Result<()> {
    cfg.validate()?;
    let (p, d) = (cfg.patch_size, cfg.d_dino);
    init.fan_in("aux.patch_embed.weight", &[p, p, 1, d], p * p, false);
    init.zeros("aux.patch_embed.bias", &[d], false);
    for i in 0..cfg.depth {
        init_block(init, &format!("aux.block{i}"), d);
    }
    init.ones("aux.norm.gamma", &[d], false);
    init.zeros("aux.norm.beta", &[d], false);
    Ok(())
}

/// Patch embedding, `depth` transformer blocks without a class token, final
/// norm; returns `[b, H/p, W/p, d_dino]`.
pub fn encode_aux<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &AuxConfig, image: Var) -> Result<Var> {
    cfg.validate()?;
    let (h, w) = match *tape.shape(image) {
        [_, h, w, 1] => (h, w),
        ref s => {
            return Err(Error::shape(
                "encode_aux",
                format!("expected (b,H,W,1) image, got {s:?}"),
            ))
        }
    };
    if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return Err(Error::shape(
            "encode_aux",
            format!("input {h}x{w} must be a multiple of patch size {}", cfg.patch_size),
        ));
    }
    let pw = tape.param(store, "aux.patch_embed.weight")?;
    let pb = tape.param(store, "aux.patch_embed.bias")?;
    let mut x = tape.conv2d(image, pw, Some(pb), cfg.patch_size, 0)?;
    for i in 0..cfg.depth {
        x = hiera_block(tape, store, &format!("aux.block{i}"), x, cfg.heads, None)?;
    }
    let g = tape.param(store, "aux.norm.gamma")?;
    let b = tape.param(store, "aux.norm.beta")?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// The auxiliary encoder is never fine-tuned.
pub fn trainable_parameters<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    store
        .iter()
        .filter(|(name, p)| name.starts_with("aux.") && p.trainable)
        .map(|(name, _)| name.to_string())
        .collect()
}
