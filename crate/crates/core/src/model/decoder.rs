//! Coarse-to-fine decoder and upsampling projection head.

use serde::{Deserialize, Serialize};

use super::hiera::{FeaturePyramid, LN_EPS};
use super::init::Init;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Fuses every pyramid level, coarse to fine.
    #[default]
    Hierarchical,
    /// Projection head applied to the finest level only.
    FinestOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Output width of each fuse step, coarse to fine.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Widths of the ×2 upsampling stages in the projection head.
    pub head_channels: Vec<usize>,
    pub head_activation: bool,
    pub kind: DecoderKind,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![256, 128, 64],
            num_classes: 3,
            head_channels: vec![128, 64],
            head_activation: true,
            kind: DecoderKind::Hierarchical,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, levels: usize, finest_stride: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("decoder needs at least two classes".into()));
        }
        if self.kind == DecoderKind::Hierarchical && self.channels.len() != levels {
            return Err(Error::Config(format!(
                "decoder has {} channel entries for {levels} pyramid levels",
                self.channels.len()
            )));
        }
        if 1usize << self.head_channels.len() != finest_stride {
            return Err(Error::Config(format!(
                "{} head stages cannot lift stride {finest_stride} to full resolution",
                self.head_channels.len()
            )));
        }
        Ok(())
    }

    /// Number of pyramid levels the decoder reads.
    pub fn levels_consumed(&self) -> usize {
        match self.kind {
            DecoderKind::Hierarchical => self.channels.len(),
            DecoderKind::FinestOnly => 1,
        }
    }
}

fn init_conv<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, k: usize, c_in: usize, c_out: usize) {
    init.he(&format!("{prefix}.weight"), &[k, k, c_in, c_out], k * k * c_in, true);
    init.zeros(&format!("{prefix}.bias"), &[c_out], true);
}

fn init_conv_block<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, c_in: usize, c_out: usize) {
    init_conv(init, &format!("{prefix}.conv1"), 3, c_in, c_out);
    init_conv(init, &format!("{prefix}.conv2"), 3, c_out, c_out);
    for norm in ["norm1", "norm2"] {
        init.ones(&format!("{prefix}.{norm}.gamma"), &[c_out], true);
        init.zeros(&format!("{prefix}.{norm}.beta"), &[c_out], true);
    }
}

/// `in_channels` is the width of every (fused) pyramid level.
pub(crate) fn init_decoder<T: Scalar>(init: &mut Init<'_, T>, cfg: &DecoderConfig, in_channels: usize) {
    let mut width = in_channels;
    if cfg.kind == DecoderKind::Hierarchical {
        for (i, &c) in cfg.channels.iter().enumerate() {
            if i == 0 {
                init_conv_block(init, "decoder.level0", in_channels, c);
            } else {
                init_conv(init, &format!("decoder.level{i}.up"), 2, width, c);
                init_conv_block(init, &format!("decoder.level{i}"), c + in_channels, c);
            }
            width = c;
        }
    }
    for (j, &c) in cfg.head_channels.iter().enumerate() {
        init_conv(init, &format!("decoder.head.up{j}"), 2, width, c);
        init_conv(init, &format!("decoder.head.conv{j}"), 3, c, c);
        width = c;
    }
    init_conv(init, "decoder.head.out", 1, width, cfg.num_classes);
}

fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let k = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.conv2d(x, k, Some(b), stride, pad)
}

fn up<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let k = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.conv_transpose2d(x, k, Some(b), 2)
}

/// Two same-padded 3×3 convolutions, each followed by channel layer-norm and
/// GELU.
pub fn conv_block<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let mut x = x;
    for (c, n) in [("conv1", "norm1"), ("conv2", "norm2")] {
        x = conv(tape, store, &format!("{prefix}.{c}"), x, 1, 1)?;
        let g = tape.param(store, &format!("{prefix}.{n}.gamma"))?;
        let b = tape.param(store, &format!("{prefix}.{n}.beta"))?;
        x = tape.layer_norm(x, g, b, LN_EPS)?;
        x = tape.gelu(x)?;
    }
    Ok(x)
}

/// Upsampling stack from the finest feature stride to full resolution, then a
/// 1×1 convolution to class logits.
pub fn projection_head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    x: Var,
) -> Result<Var> {
    let mut x = x;
    for j in 0..cfg.head_channels.len() {
        x = up(tape, store, &format!("decoder.head.up{j}"), x)?;
        x = conv(tape, store, &format!("decoder.head.conv{j}"), x, 1, 1)?;
        if cfg.head_activation {
            x = tape.gelu(x)?;
        }
    }
    conv(tape, store, "decoder.head.out", x, 1, 0)
}

/// Decodes a finest-first pyramid into logits `[b, H, W, C]`. Also returns the
/// feature map after each fuse step.
pub fn decode_with_trace<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    pyramid: &FeaturePyramid,
) -> Result<(Var, Vec<Var>)> {
    let finest_stride = *pyramid
        .strides
        .first()
        .ok_or_else(|| Error::Config("empty feature pyramid".into()))?;
    let mut trace = Vec::new();
    let x = match cfg.kind {
        DecoderKind::FinestOnly => {
            if 1usize << cfg.head_channels.len() != finest_stride {
                return Err(Error::Config("head depth does not match finest stride".into()));
            }
            pyramid.levels[0]
        }
        DecoderKind::Hierarchical => {
            cfg.validate(pyramid.len(), finest_stride)?;
            let n = pyramid.len();
            let mut x = conv_block(tape, store, "decoder.level0", pyramid.levels[n - 1])?;
            trace.push(x);
            for i in 1..n {
                let skip = pyramid.levels[n - 1 - i];
                let upsampled = up(tape, store, &format!("decoder.level{i}.up"), x)?;
                let merged = tape.concat(&[upsampled, skip])?;
                x = conv_block(tape, store, &format!("decoder.level{i}"), merged)?;
                trace.push(x);
            }
            x
        }
    };
    Ok((projection_head(tape, store, cfg, x)?, trace))
}

pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    pyramid: &FeaturePyramid,
) -> Result<Var> {
    Ok(decode_with_trace(tape, store, cfg, pyramid)?.0)
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
pub fn predict<T: Scalar>(logits: &crate::tensor::Tensor<T>) -> Vec<u8> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
