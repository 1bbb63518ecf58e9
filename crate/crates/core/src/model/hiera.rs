//! Frozen hierarchical encoder with bottleneck adapters in every block.

use serde::{Deserialize, Serialize};

use super::init::Init;
use crate::autodiff::{AttentionWeights, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;

/// Where the adapter sits inside a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    /// Between the attention residual and the MLP sub-block.
    #[default]
    AfterAttention,
    /// After the MLP residual.
    AfterMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HieraConfig {
    pub num_stages: usize,
    pub blocks_per_stage: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub heads_per_stage: Vec<usize>,
    pub patch_stride: usize,
    /// Channel count shared by every pyramid level after the neck.
    pub d_hiera: usize,
    pub adapter_enabled: bool,
    pub adapter_placement: AdapterPlacement,
}

impl Default for HieraConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            blocks_per_stage: vec![1, 1, 1],
            stage_dims: vec![32, 64, 128],
            heads_per_stage: vec![1, 2, 4],
            patch_stride: 4,
            d_hiera: 64,
            adapter_enabled: true,
            adapter_placement: AdapterPlacement::AfterAttention,
        }
    }
}

impl HieraConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages;
        if n == 0 {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.blocks_per_stage.len() != n || self.stage_dims.len() != n || self.heads_per_stage.len() != n {
            return Err(Error::Config(format!(
                "blocks_per_stage, stage_dims and heads_per_stage must all have {n} entries"
            )));
        }
        for (s, (&d, &h)) in self.stage_dims.iter().zip(&self.heads_per_stage).enumerate() {
            if h == 0 || d % h != 0 {
                return Err(Error::Config(format!("stage {s}: dim {d} not divisible by {h} heads")));
            }
            if self.adapter_enabled {
                adapter_rank(d)?;
            }
        }
        if self.patch_stride == 0 || self.d_hiera == 0 {
            return Err(Error::Config("patch_stride and d_hiera must be positive".into()));
        }
        Ok(())
    }

    /// Spatial stride of stage `s` relative to the input image.
    pub fn stage_stride(&self, s: usize) -> usize {
        self.patch_stride << s
    }

    /// Required divisor of the input height and width.
    pub fn input_multiple(&self) -> usize {
        self.stage_stride(self.num_stages - 1)
    }
}

/// Bottleneck width `r = d/4`.
pub fn adapter_rank(d: usize) -> Result<usize> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("adapter width {d} is not divisible by 4")));
    }
    Ok(d / 4)
}

/// Adapter tensors bound on a tape: `W_down [d, r]`, `b_down [r]`,
/// `W_up [r, d]`, `b_up [d]`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterWeights {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

impl AdapterWeights {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_down: tape.param(store, &format!("{prefix}.w_down"))?,
            b_down: tape.param(store, &format!("{prefix}.b_down"))?,
            w_up: tape.param(store, &format!("{prefix}.w_up"))?,
            b_up: tape.param(store, &format!("{prefix}.b_up"))?,
        })
    }
}

/// `GELU(X·W_down + b_down)·W_up + b_up + X`, applied per position over the
/// last axis.
pub fn adapter_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &AdapterWeights) -> Result<Var> {
    let d = tape.value(x).last_dim();
    let r = adapter_rank(d)?;
    if tape.shape(w.w_down) != [d, r] || tape.shape(w.w_up) != [r, d] {
        return Err(Error::shape(
            "adapter_forward",
            format!(
                "weights {:?}/{:?} do not match d={d}, r={r}",
                tape.shape(w.w_down),
                tape.shape(w.w_up)
            ),
        ));
    }
    let h = tape.linear(x, w.w_down, Some(w.b_down))?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, w.w_up, Some(w.b_up))?;
    tape.add(h, x)
}

/// Creates adapter tensors with the up-projection zeroed, so the adapter
/// starts as the identity.
pub(crate) fn init_adapter<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, d: usize) -> Result<()> {
    let r = adapter_rank(d)?;
    init.fan_in(&format!("{prefix}.w_down"), &[d, r], d, true);
    init.zeros(&format!("{prefix}.b_down"), &[r], true);
    init.zeros(&format!("{prefix}.w_up"), &[r, d], true);
    init.zeros(&format!("{prefix}.b_up"), &[d], true);
    Ok(())
}

pub(crate) fn init_block<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, d: usize) {
    for norm in ["norm1", "norm2"] {
        init.ones(&format!("{prefix}.{norm}.gamma"), &[d], false);
        init.zeros(&format!("{prefix}.{norm}.beta"), &[d], false);
    }
    for proj in ["wq", "wk", "wv", "wo"] {
        init.fan_in(&format!("{prefix}.attn.{proj}"), &[d, d], d, false);
    }
    let hidden = d * MLP_RATIO;
    init.fan_in(&format!("{prefix}.mlp.fc1.weight"), &[d, hidden], d, false);
    init.zeros(&format!("{prefix}.mlp.fc1.bias"), &[hidden], false);
    init.fan_in(&format!("{prefix}.mlp.fc2.weight"), &[hidden, d], hidden, false);
    init.zeros(&format!("{prefix}.mlp.fc2.bias"), &[d], false);
}

/// Transformer block over a `[b, h, w, d]` map:
/// `X₁ = X + attn(LN(X))`, optional adapter, then `X₁ + mlp(LN(X₁))`.
pub fn hiera_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    adapter: Option<(&AdapterWeights, AdapterPlacement)>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, tokens, d) = match shape[..] {
        [b, h, w, d] => (b, h * w, d),
        [b, t, d] => (b, t, d),
        _ => {
            return Err(Error::shape(
                "hiera_block",
                format!("expected (b,h,w,d), got {shape:?}"),
            ))
        }
    };
    let p = |n: &str| format!("{prefix}.{n}");
    let tokens_in = tape.reshape(x, &[b, tokens, d])?;

    let (g1, b1) = (
        tape.param(store, &p("norm1.gamma"))?,
        tape.param(store, &p("norm1.beta"))?,
    );
    let n1 = tape.layer_norm(tokens_in, g1, b1, LN_EPS)?;
    let weights = AttentionWeights {
        wq: tape.param(store, &p("attn.wq"))?,
        wk: tape.param(store, &p("attn.wk"))?,
        wv: tape.param(store, &p("attn.wv"))?,
        wo: tape.param(store, &p("attn.wo"))?,
    };
    let a = tape.attention(n1, heads, &weights)?;
    let mut x1 = tape.add(tokens_in, a)?;
    if let Some((w, AdapterPlacement::AfterAttention)) = adapter {
        x1 = adapter_forward(tape, x1, w)?;
    }

    let (g2, b2) = (
        tape.param(store, &p("norm2.gamma"))?,
        tape.param(store, &p("norm2.beta"))?,
    );
    let n2 = tape.layer_norm(x1, g2, b2, LN_EPS)?;
    let (w1, bias1) = (
        tape.param(store, &p("mlp.fc1.weight"))?,
        tape.param(store, &p("mlp.fc1.bias"))?,
    );
    let (w2, bias2) = (
        tape.param(store, &p("mlp.fc2.weight"))?,
        tape.param(store, &p("mlp.fc2.bias"))?,
    );
    let m = tape.linear(n2, w1, Some(bias1))?;
    let m = tape.gelu(m)?;
    let m = tape.linear(m, w2, Some(bias2))?;
    let mut out = tape.add(x1, m)?;
    if let Some((w, AdapterPlacement::AfterMlp)) = adapter {
        out = adapter_forward(tape, out, w)?;
    }
    tape.reshape(out, &shape)
}

/// Multi-scale feature maps, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    /// Stride of each level relative to the input image.
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Spatial `(h, w)` of every level.
    pub fn extents<T: Scalar>(&self, tape: &Tape<T>) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|&v| {
                let s = tape.shape(v);
                (s[1], s[2])
            })
            .collect()
    }
}

fn adapter_prefix(stage: usize, block: usize) -> String {
    format!("adapter.stage{stage}.block{block}")
}

pub(crate) fn init_encoder<T: Scalar>(init: &mut Init<'_, T>, cfg: &HieraConfig) -> Result<()> {
    cfg.validate()?;
    let ps = cfg.patch_stride;
    let d0 = cfg.stage_dims[0];
    init.fan_in("encoder.patch_embed.weight", &[ps, ps, 1, d0], ps * ps, false);
    init.zeros("encoder.patch_embed.bias", &[d0], false);
    for s in 0..cfg.num_stages {
        let d = cfg.stage_dims[s];
        if s > 0 {
            let prev = cfg.stage_dims[s - 1];
            init.fan_in(&format!("encoder.stage{s}.transition.weight"), &[prev, d], prev, false);
            init.zeros(&format!("encoder.stage{s}.transition.bias"), &[d], false);
        }
        for blk in 0..cfg.blocks_per_stage[s] {
            init_block(init, &format!("encoder.stage{s}.block{blk}"), d);
            if cfg.adapter_enabled {
                init_adapter(init, &adapter_prefix(s, blk), d)?;
            }
        }
        init.fan_in(&format!("encoder.neck{s}.weight"), &[d, cfg.d_hiera], d, false);
        init.zeros(&format!("encoder.neck{s}.bias"), &[cfg.d_hiera], false);
    }
    Ok(())
}

/// Runs the encoder on `image [b, H, W, 1]` and returns one level per stage.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &HieraConfig,
    image: Var,
) -> Result<FeaturePyramid> {
    cfg.validate()?;
    let (h, w) = match *tape.shape(image) {
        [_, h, w, 1] => (h, w),
        ref s => return Err(Error::shape("encode", format!("expected (b,H,W,1) image, got {s:?}"))),
    };
    let multiple = cfg.input_multiple();
    if h % multiple != 0 || w % multiple != 0 {
        return Err(Error::shape(
            "encode",
            format!("input {h}x{w} must be a multiple of {multiple} (patch_stride * 2^(N-1))"),
        ));
    }
    let pw = tape.param(store, "encoder.patch_embed.weight")?;
    let pb = tape.param(store, "encoder.patch_embed.bias")?;
    let mut x = tape.conv2d(image, pw, Some(pb), cfg.patch_stride, 0)?;

    let mut levels = Vec::with_capacity(cfg.num_stages);
    for s in 0..cfg.num_stages {
        if s > 0 {
            x = tape.max_pool2(x)?;
            let tw = tape.param(store, &format!("encoder.stage{s}.transition.weight"))?;
            let tb = tape.param(store, &format!("encoder.stage{s}.transition.bias"))?;
            x = tape.linear(x, tw, Some(tb))?;
        }
        for blk in 0..cfg.blocks_per_stage[s] {
            let adapter = if cfg.adapter_enabled {
                Some(AdapterWeights::bind(tape, store, &adapter_prefix(s, blk))?)
            } else {
                None
            };
            x = hiera_block(
                tape,
                store,
                &format!("encoder.stage{s}.block{blk}"),
                x,
                cfg.heads_per_stage[s],
                adapter.as_ref().map(|a| (a, cfg.adapter_placement)),
            )?;
        }
        let nw = tape.param(store, &format!("encoder.neck{s}.weight"))?;
        let nb = tape.param(store, &format!("encoder.neck{s}.bias"))?;
        levels.push(tape.linear(x, nw, Some(nb))?);
    }
    Ok(FeaturePyramid {
        levels,
        strides: (0..cfg.num_stages).map(|s| cfg.stage_stride(s)).collect(),
    })
}

/// Names of the encoder tensors updated during fine-tuning: the adapters when
/// enabled, nothing otherwise.
pub fn trainable_parameters<T: Scalar>(cfg: &HieraConfig, store: &ParamStore<T>) -> Vec<String> {
    if !cfg.adapter_enabled {
        return Vec::new();
    }
    store
        .iter()
        .filter(|(name, p)| name.starts_with("adapter.") && p.trainable)
        .map(|(name, _)| name.to_string())
        .collect()
}
