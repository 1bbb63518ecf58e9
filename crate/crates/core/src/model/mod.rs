//! The segmentation network: adapted hierarchical encoder, auxiliary encoder,
//! feature fusion and decoder.

pub mod aux;
pub mod decoder;
pub mod fusion;
pub mod hiera;
pub(crate) mod init;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use aux::AuxConfig;
use decoder::{DecoderConfig, DecoderKind};
use fusion::{FusionConfig, FusionMode};
use hiera::{FeaturePyramid, HieraConfig};
use init::Init;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: HieraConfig,
    pub aux: AuxConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.fusion.mode != FusionMode::None {
            self.aux.validate()?;
        }
        if self.decoder.kind == DecoderKind::FinestOnly && self.fusion.mode != FusionMode::None {
            return Err(Error::Config("the finest-only decoder takes unfused features".into()));
        }
        self.decoder
            .validate(self.encoder.num_stages, self.encoder.stage_stride(0))
            .or_else(|e| match self.decoder.kind {
                DecoderKind::FinestOnly if (1 << self.decoder.head_channels.len()) == self.encoder.patch_stride => {
                    Ok(())
                }
                _ => Err(e),
            })
    }

    /// Required divisor of the input height and width.
    pub fn input_multiple(&self) -> usize {
        let enc = self.encoder.input_multiple();
        if self.fusion.mode == FusionMode::None {
            enc
        } else {
            num_integer_lcm(enc, self.aux.patch_size)
        }
    }
}

fn num_integer_lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

/// Intermediate results of one forward pass.
pub struct ForwardParts {
    pub pyramid: FeaturePyramid,
    pub aux: Option<Var>,
    pub fused: FeaturePyramid,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SegModel<T> {
    /// Builds the model with seeded weights. The backbone and auxiliary
    /// encoder are frozen; adapters, projection and decoder are trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            seed,
        };
        hiera::init_encoder(&mut init, &config.encoder)?;
        if config.fusion.mode != FusionMode::None {
            aux::init_aux(&mut init, &config.aux)?;
            fusion::init_fusion(&mut init, config.aux.d_dino, config.encoder.d_hiera);
        }
        let width = config.fusion.output_channels(config.encoder.d_hiera);
        decoder::init_decoder(&mut init, &config.decoder, width);
        Ok(Self { config, params })
    }

    pub fn forward_parts(&self, tape: &mut Tape<T>, image: Var) -> Result<ForwardParts> {
        let cfg = &self.config;
        let pyramid = hiera::encode(tape, &self.params, &cfg.encoder, image)?;
        let aux = match cfg.fusion.mode {
            FusionMode::None => None,
            _ => Some(aux::encode_aux(tape, &self.params, &cfg.aux, image)?),
        };
        let fused = fusion::fuse_pyramid(tape, &self.params, &cfg.fusion, &pyramid, aux)?;
        let logits = decoder::decode(tape, &self.params, &cfg.decoder, &fused)?;
        Ok(ForwardParts {
            pyramid,
            aux,
            fused,
            logits,
        })
    }

    /// Logits `[b, H, W, C]` for `image [b, H, W, 1]`.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, image)?.logits)
    }

    /// Forward pass outside any training step.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone())?;
        let logits = self.forward(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }
}
